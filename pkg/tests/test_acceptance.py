"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines
inline; they are also printed when output is captured.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from asrmix import alignment as A
from asrmix import corpusgen as C
from asrmix import evaluation as E
from asrmix import model as M
from asrmix import tokenizer as T
from asrmix import training as TR
from asrmix.cli import main

from oracles import central_differences, edit_distance, naive_f1, naive_wrongly_tagged


def verdict(capsys, number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


def run(*argv):
    return main([str(a) for a in argv])


def test_1_alignment_matches_recursive_oracle(capsys):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    bad = 0
    for _ in range(10_000):
        h = "".join(rng.choice(list("abcd"), size=rng.integers(0, 9)))
        r = "".join(rng.choice(list("abcd"), size=rng.integers(0, 9)))
        script = A.align(h, r)
        if script.distance != edit_distance(h, r) or A.apply_script(h, script) != r:
            bad += 1
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, bad == 0 and elapsed < 30,
            f"{bad} mismatches in 10000 pairs, {elapsed:.1f}s")


def test_2_label_mass_conservation(capsys):
    rng = np.random.default_rng(2)
    worst_mass, out_of_range = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        mask = rng.random(n) < 0.8
        y = (rng.random(n) < 0.3).astype(np.float64) * mask
        h = rng.normal(size=(n, 4))
        lam = float(rng.random())
        perm = np.arange(n)
        real = np.flatnonzero(mask)
        perm[real] = rng.permutation(real)
        _, y_new, _ = M.mixup_layer(h, y, mask, M.MixupConfig(), rng, lam=lam, perm=perm)
        worst_mass = max(worst_mass, abs(float(y_new.sum() - y.sum())))
        out_of_range += int(np.sum((y_new < 0) | (y_new > 1)))
    verdict(capsys, 2, worst_mass <= 1e-9 and out_of_range == 0,
            f"max |mass drift| {worst_mass:.2e}, {out_of_range} labels outside [0,1]")


GRAD_CFG = M.ModelConfig(vocab_size=8, d_model=4, n_layers=2, n_heads=2, d_ff=6, max_len=8,
                         dropout=0.0)


def _rel_error(a, b):
    num = math.sqrt(sum(float(np.sum((a[k] - b[k]) ** 2)) for k in a))
    den = max(math.sqrt(sum(float(np.sum(a[k] ** 2)) for k in a)),
              math.sqrt(sum(float(np.sum(b[k] ** 2)) for k in b)), 1e-30)
    return num / den


def test_3_gradient_check(capsys):
    n_params = M.count_params(M.init_params(GRAD_CFG))
    start = time.perf_counter()
    worst = 0.0
    for draw_seed in range(20):
        rng = np.random.default_rng(300 + draw_seed)
        params = {k: v + rng.normal(0, 0.3, size=v.shape)
                  for k, v in M.init_params(GRAD_CFG, seed=draw_seed, dtype=np.float64).items()}
        ids = rng.integers(0, GRAD_CFG.vocab_size, size=(2, 5))
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 1, 0]], dtype=bool)
        labels = (rng.random((2, 5)) < 0.4).astype(np.float64) * mask
        batch = M.Batch(ids, mask, labels, np.zeros((2, 5), dtype=np.int64))
        perms = np.stack([rng.permutation(5), np.r_[rng.permutation(4), 4]])
        for draw in (None, M.MixupDraw(np.array([0.7, 0.7]), perms)):
            def loss(p):
                H = M.forward_encoder(p, GRAD_CFG, ids, mask)
                Y = labels
                if draw is not None:
                    H, Y = M.mix_batch(H, Y, mask, draw)
                return M.bce_loss(M.tch_forward(p, H), Y, mask)

            _, grads = M.loss_and_grads(params, GRAD_CFG, batch, draw=draw)
            worst = max(worst, _rel_error(grads, central_differences(loss, params)))
    elapsed = time.perf_counter() - start
    verdict(capsys, 3, n_params <= 500 and worst < 1e-4 and elapsed < 60,
            f"{n_params} params, worst relative error {worst:.2e} over 40 checks, {elapsed:.1f}s")


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    """200 synthetic utterances, labelled and tokenized through the CLI."""
    d = tmp_path_factory.mktemp("small")
    assert run("generate", "--output", d / "corpus.jsonl", "--n", 200, "--seed", 11) == 0
    assert run("label", "--input", d / "corpus.jsonl", "--output", d / "labeled.jsonl") == 0
    assert run("train-bpe", "--input", d / "labeled.jsonl", "--output", d / "bpe.json",
               "--vocab-size", 120) == 0
    assert run("tokenize", "--input", d / "labeled.jsonl", "--bpe", d / "bpe.json",
               "--output", d / "tok.jsonl") == 0
    return d


def test_4_lambda_one_reproduces_no_mixup(small_corpus, capsys):
    bpe = T.BpeModel.load(small_corpus / "bpe.json")
    examples = T.read_tokenized(small_corpus / "tok.jsonl")
    splits = TR.DatasetSplits(*TR.split_dataset(examples, TR.SplitSpec(seed=0)))
    mcfg = M.ModelConfig(vocab_size=len(bpe.vocab), d_model=32, n_layers=2, n_heads=4, d_ff=64)
    tcfg = TR.TrainConfig(epochs=3, seed=7, early_stop_patience=3)
    off = TR.train_run(splits, mcfg, M.MixupConfig(enabled=False, seed=7), tcfg, bpe.pad_id)
    one = TR.train_run(splits, mcfg, M.MixupConfig(fixed_lambda=1.0, seed=7), tcfg, bpe.pad_id)
    diffs = [abs(a["train_loss"] - b["train_loss"]) for a, b in zip(off.history, one.history)]
    ok = len(examples) == 200 and len(off.history) == len(one.history) == 3 and max(diffs) <= 1e-9
    verdict(capsys, 4, ok, f"{len(examples)} examples, max per-epoch loss gap {max(diffs):.2e}")


def test_5_metrics_match_naive_oracles(capsys):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(0, 60))
        probs = rng.random(n)
        labels = rng.integers(0, 2, n)
        flags = rng.integers(0, 2, n)
        mask = rng.random(n) < 0.85
        threshold = float(rng.uniform(0.05, 0.95))
        same_f1 = E.error_detection_f1(probs, labels, mask, threshold) == naive_f1(
            probs, labels, mask, threshold)
        same_wt = E.disfluencies_wrongly_tagged(probs, labels, flags, mask, threshold) == \
            naive_wrongly_tagged(probs, labels, flags, mask, threshold)
        mismatches += int(not (same_f1 and same_wt))
    verdict(capsys, 5, mismatches == 0, f"{mismatches} mismatches in 1000 triples")


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    """The default 2,000-utterance corpus, with CLI defaults at every stage."""
    d = tmp_path_factory.mktemp("desk")
    assert run("generate", "--output", d / "corpus.jsonl", "--n", 2000) == 0
    assert run("label", "--input", d / "corpus.jsonl", "--output", d / "labeled.jsonl") == 0
    assert run("train-bpe", "--input", d / "labeled.jsonl", "--output", d / "bpe.json") == 0
    assert run("tokenize", "--input", d / "labeled.jsonl", "--bpe", d / "bpe.json",
               "--output", d / "tok.jsonl") == 0
    return d


@pytest.mark.slow
def test_6_desk_scale_directional_comparison(desk_corpus, capsys):
    start = time.perf_counter()
    assert run("stats", "--input", desk_corpus / "tok.jsonl",
               "--output", desk_corpus / "stats.json") == 0
    stats = json.loads((desk_corpus / "stats.json").read_text())
    assert run("compare", "--input", desk_corpus / "tok.jsonl", "--bpe", desk_corpus / "bpe.json",
               "--output", desk_corpus / "cmp", "--seeds", "0,1,2,3,4,5", "--alpha", 0.2) == 0
    elapsed = time.perf_counter() - start
    result = json.loads((desk_corpus / "cmp" / "compare.json").read_text())
    mix, base = result["mixup"]["mean"], result["no_mixup"]["mean"]
    rate = stats["token_level_error_rate"]
    rate_ok = stats["training_samples"] == 2000 and 0.05 <= rate <= 0.20
    f1_ok = mix["f1"] >= base["f1"] - 0.01
    wt_ok = mix["disfluencies_wrongly_tagged"] <= base["disfluencies_wrongly_tagged"]
    detail = (f"token error rate {rate:.3f}; F1 mixup {mix['f1']:.4f} vs no-mixup "
              f"{base['f1']:.4f} [{'ok' if f1_ok else 'below margin'}]; wrongly tagged "
              f"{mix['disfluencies_wrongly_tagged']:.2f} vs "
              f"{base['disfluencies_wrongly_tagged']:.2f} [{'ok' if wt_ok else 'higher'}]; "
              f"{elapsed / 60:.1f} min")
    verdict(capsys, 6, rate_ok and f1_ok and wt_ok and elapsed < 30 * 60, detail)


SWEEP_MODEL = ["--d-model", "32", "--n-layers", "1", "--n-heads", "2", "--d-ff", "64",
               "--epochs", "3"]


@pytest.mark.slow
def test_7_alpha_sweep_artifact(desk_corpus, capsys):
    # no claim is made about the curve, so a reduced model keeps the 18 runs cheap
    out = desk_corpus / "sweep"
    assert run("sweep-alpha", "--input", desk_corpus / "tok.jsonl", "--bpe",
               desk_corpus / "bpe.json", "--output", out, "--alphas", "0.05,0.1,0.2,0.4,1.0",
               "--seeds", "0,1,2", *SWEEP_MODEL) == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    required = ["alpha", "seed_count", "mean_wrongly_tagged", "variance", "normalized_mean",
                "mean_f1"]
    ok = (len(rows) == 5
          and list(rows[0])[:6] == required
          and [float(r["alpha"]) for r in rows] == [0.05, 0.1, 0.2, 0.4, 1.0]
          and all(int(r["seed_count"]) == 3 for r in rows)
          and all(math.isfinite(float(r[k])) for r in rows for k in required[2:])
          and all(float(r["variance"]) >= 0 for r in rows))
    verdict(capsys, 7, ok, f"{len(rows)} rows with columns {list(rows[0]) if rows else []}")


TINY_MODEL = ["--d-model", "8", "--n-layers", "1", "--n-heads", "2", "--d-ff", "16",
              "--epochs", "2", "--batch-size", "16"]


def _pipeline(d):
    assert run("generate", "--output", d / "corpus.jsonl", "--n", 80, "--seed", 4) == 0
    assert run("label", "--input", d / "corpus.jsonl", "--output", d / "labeled.jsonl") == 0
    assert run("train-bpe", "--input", d / "labeled.jsonl", "--output", d / "bpe.json",
               "--vocab-size", 60) == 0
    assert run("tokenize", "--input", d / "labeled.jsonl", "--bpe", d / "bpe.json",
               "--output", d / "tok.jsonl") == 0
    assert run("stats", "--input", d / "tok.jsonl", "--output", d / "stats.json") == 0
    data = ["--input", d / "tok.jsonl", "--bpe", d / "bpe.json"]
    assert run("train", *data, "--output", d / "run", "--seed", 3, *TINY_MODEL) == 0
    assert run("evaluate", "--input", d / "tok.jsonl", "--checkpoint", d / "run" / "best.ckpt",
               "--output", d / "eval.json") == 0
    assert run("compare", *data, "--output", d / "cmp", "--seeds", "0,1", *TINY_MODEL) == 0
    assert run("sweep-alpha", *data, "--output", d / "sweep", "--seeds", "0,1",
               "--alphas", "0.2,0.4", *TINY_MODEL) == 0


def test_8_every_subcommand_is_deterministic(tmp_path, capsys):
    for k in ("a", "b"):
        (tmp_path / k).mkdir()
        _pipeline(tmp_path / k)
    # manifests record the absolute output paths, which differ by design
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and "manifest" not in p.name)
    differing = [str(f) for f in files
                 if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    verdict(capsys, 8, len(files) >= 15 and not differing,
            f"{len(files)} output files compared, differing: {differing or 'none'}")
