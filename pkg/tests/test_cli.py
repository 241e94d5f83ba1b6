import csv
import json

import pytest

from asrmix import alignment as A
from asrmix.cli import main

TINY_MODEL = ["--d-model", "8", "--n-layers", "1", "--n-heads", "2", "--d-ff", "16",
              "--epochs", "1", "--batch-size", "16"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("generate", "--output", d / "corpus.jsonl", "--n", 60, "--seed", 3) == 0
    assert run("label", "--input", d / "corpus.jsonl", "--output", d / "labeled.jsonl") == 0
    assert run("train-bpe", "--input", d / "labeled.jsonl", "--output", d / "bpe.json",
               "--vocab-size", 60) == 0
    assert run("tokenize", "--input", d / "labeled.jsonl", "--bpe", d / "bpe.json",
               "--output", d / "tok.jsonl") == 0
    return d


def test_pipeline_outputs_and_manifests(pipeline):
    for name in ("corpus.jsonl", "labeled.jsonl", "bpe.json", "tok.jsonl"):
        assert (pipeline / name).exists()
        manifest = json.loads((pipeline / f"{name}.manifest.json").read_text())
        assert "config" in manifest
    assert len((pipeline / "tok.jsonl").read_text().splitlines()) == 60


def test_stats_command(pipeline, capsys):
    assert run("stats", "--input", pipeline / "tok.jsonl") == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["training_samples"] == 60
    assert 0 < stats["token_level_error_rate"] < 1


def test_train_and_evaluate(pipeline):
    out = pipeline / "run"
    assert run("train", "--input", pipeline / "tok.jsonl", "--bpe", pipeline / "bpe.json",
               "--output", out, "--seed", 1, *TINY_MODEL) == 0
    for name in ("config.json", "history.jsonl", "best.ckpt", "final.ckpt", "report.json",
                 "manifest.json"):
        assert (out / name).exists()
    assert run("evaluate", "--input", pipeline / "tok.jsonl", "--checkpoint", out / "best.ckpt",
               "--output", pipeline / "eval.json") == 0
    assert json.loads((pipeline / "eval.json").read_text()) == json.loads(
        (out / "report.json").read_text())


def test_reruns_are_byte_identical(pipeline, tmp_path):
    for k in (1, 2):
        d = tmp_path / str(k)
        d.mkdir()
        assert run("generate", "--output", d / "c.jsonl", "--n", 30, "--seed", 8) == 0
        assert run("label", "--input", d / "c.jsonl", "--output", d / "l.jsonl") == 0
        assert run("train", "--input", pipeline / "tok.jsonl", "--bpe", pipeline / "bpe.json",
                   "--output", d / "run", *TINY_MODEL) == 0
    for name in ("c.jsonl", "l.jsonl", "run/best.ckpt", "run/final.ckpt", "run/report.json",
                 "run/history.jsonl"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()


def test_compare_and_sweep(pipeline):
    common = ["--input", pipeline / "tok.jsonl", "--bpe", pipeline / "bpe.json", *TINY_MODEL]
    assert run("compare", *common, "--output", pipeline / "cmp", "--seeds", "0,1") == 0
    rows = list(csv.DictReader(open(pipeline / "cmp" / "compare.csv")))
    assert [r["row"] for r in rows] == ["seed=0", "seed=1", "mean", "variance"]
    assert run("sweep-alpha", *common, "--output", pipeline / "sw", "--seeds", "0,1",
               "--alphas", "0.1,0.2,0.4") == 0
    rows = list(csv.DictReader(open(pipeline / "sw" / "sweep.csv")))
    assert [float(r["alpha"]) for r in rows] == [0.1, 0.2, 0.4]


def test_compare_lambda_one_columns_agree(pipeline):
    assert run("compare", "--input", pipeline / "tok.jsonl", "--bpe", pipeline / "bpe.json",
               *TINY_MODEL, "--output", pipeline / "cmp1", "--seeds", "0,1",
               "--fixed-lambda", "1") == 0
    for row in csv.DictReader(open(pipeline / "cmp1" / "compare.csv")):
        assert row["f1_mixup"] == row["f1_no_mixup"]
        assert row["wrongly_tagged_mixup"] == row["wrongly_tagged_no_mixup"]


def test_label_identical_corpus_has_no_errors(tmp_path):
    src = tmp_path / "in.jsonl"
    recs = [{"utterance_id": "a", "reference": "i um go", "hypothesis": "i um go",
             "disfluency_spans": [[2, 4]]},
            {"utterance_id": "b", "reference": "the tea", "hypothesis": "the tea",
             "disfluency_spans": []}]
    src.write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert run("label", "--input", src, "--output", tmp_path / "out.jsonl") == 0
    out = A.read_labeled(tmp_path / "out.jsonl")
    assert all(not any(u.error_mask) for u in out)
    assert out[0].disfluency_mask == [False, False, True, True, False, False, False]


def test_label_mixed_error_and_filler_record(tmp_path):
    src = tmp_path / "in.jsonl"
    src.write_text(json.dumps({"utterance_id": "f", "reference": "i like um want tea",
                               "hypothesis": "i like um wand tee",
                               "disfluency_spans": [[2, 6], [7, 9]]}) + "\n")
    assert run("label", "--input", src, "--output", tmp_path / "o.jsonl") == 0
    (u,) = A.read_labeled(tmp_path / "o.jsonl")
    um = slice(7, 9)
    assert all(u.disfluency_mask[um]) and not any(u.error_mask[um])
    assert any(u.error_mask)


def test_label_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert run("label", "--input", tmp_path / "e.jsonl", "--output", tmp_path / "o.jsonl") == 0
    assert (tmp_path / "o.jsonl").read_text() == ""


def test_label_malformed_lines_exit_one(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text('{"utterance_id": "a"}\nnot json\n')
    assert run("label", "--input", tmp_path / "bad.jsonl", "--output", tmp_path / "o.jsonl") == 1
    err = capsys.readouterr().err
    assert "line 1" in err and "line 2" in err


def test_usage_errors_exit_two(pipeline, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("label", "--input", "x", "--output", "y", "--bogus")
    assert exc.value.code == 2
    common = ["--input", pipeline / "tok.jsonl", "--bpe", pipeline / "bpe.json",
              "--output", tmp_path / "sw"]
    assert run("sweep-alpha", *common, "--alphas", "", "--seeds", "0,1") == 2
    assert run("compare", *common, "--seeds", "0") == 2
    assert run("train", *common, "--alpha", "-1", *TINY_MODEL) == 2


def test_config_file_overrides_and_rejects_unknown(pipeline, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_utterances": 7, "seed": 4}))
    assert run("generate", "--output", tmp_path / "c.jsonl", "--config", cfg) == 0
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 7
    manifest = json.loads((tmp_path / "c.jsonl.manifest.json").read_text())
    assert manifest["config"]["gen_config"]["seed"] == 4
    cfg.write_text(json.dumps({"no_such_field": 1}))
    with pytest.raises(SystemExit) as exc:
        run("generate", "--output", tmp_path / "c.jsonl", "--config", cfg)
    assert exc.value.code == 2


def test_missing_input_is_runtime_error(tmp_path):
    assert run("label", "--input", tmp_path / "nope.jsonl", "--output", tmp_path / "o.jsonl") == 1
