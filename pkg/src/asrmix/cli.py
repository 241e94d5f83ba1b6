"""Command-line entry point: ``asrmix <subcommand> ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Every
subcommand writes a manifest of its resolved configuration next to its
outputs (``<output>.manifest.json`` for files, ``manifest.json`` inside
output directories).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import alignment, corpusgen, evaluation, tokenizer, training
from . import model as M
from .errors import InvalidConfigError, InvalidInputError, NonFiniteGradientError

log = logging.getLogger("asrmix")


class UsageError(Exception):
    pass


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")
    return parse


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _write_manifest(path: Path, command: str, resolved: dict) -> None:
    path.write_text(_dump({"command": command, "version": __version__, "config": resolved}),
                    encoding="utf-8")


def _file_manifest(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


def _resolved(args) -> dict:
    skip = {"func", "config", "verbose", "command"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in skip}


# ---------------------------------------------------------------- arguments

def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int, default=128)
    g.add_argument("--n-layers", type=int, default=2)
    g.add_argument("--n-heads", type=int, default=4)
    g.add_argument("--d-ff", type=int, default=256)
    g.add_argument("--max-len", type=int, default=128)
    g.add_argument("--dropout", type=float, default=0.1)


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float, default=1e-3)
    g.add_argument("--adam-beta1", type=float, default=0.9)
    g.add_argument("--adam-beta2", type=float, default=0.999)
    g.add_argument("--adam-eps", type=float, default=1e-8)
    g.add_argument("--grad-clip", dest="grad_clip_norm", type=float, default=1.0)
    g.add_argument("--patience", dest="early_stop_patience", type=int, default=5)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--split-seed", type=int, default=0,
                   help="seed of the 8:1:1 split (fixed across training seeds)")


def _add_mixup_args(p, toggle=True):
    g = p.add_argument_group("mixup")
    if toggle:
        g.add_argument("--mixup", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--alpha", type=float, default=0.2)
    g.add_argument("--fixed-lambda", type=float, default=None,
                   help="pin lambda instead of sampling (diagnostics)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asrmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", type=Path, help="JSON object overriding flag values")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("generate", cmd_generate, "write a synthetic corpus")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--n", dest="n_utterances", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--disfluency-rate", type=float, default=0.8)
    p.add_argument("--filler-prob", type=float, default=0.5)
    p.add_argument("--repetition-prob", type=float, default=0.3)
    p.add_argument("--false-start-prob", type=float, default=0.2)
    p.add_argument("--sub-rate", type=float, default=0.04)
    p.add_argument("--del-rate", type=float, default=0.02)
    p.add_argument("--ins-rate", type=float, default=0.01)

    p = command("label", cmd_label, "align hypotheses to references and emit masks")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True,
                   help="collapse whitespace before aligning")
    p.add_argument("--lowercase", action=argparse.BooleanOptionalAction, default=True)

    p = command("train-bpe", cmd_train_bpe, "learn a subword vocabulary from hypotheses")
    p.add_argument("--input", type=Path, required=True, help="labeled or ingestion JSONL")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--vocab-size", type=int, default=400)

    p = command("tokenize", cmd_tokenize, "project character masks onto subword tokens")
    p.add_argument("--input", type=Path, required=True, help="labeled JSONL")
    p.add_argument("--bpe", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--max-len", type=int, default=128)

    p = command("stats", cmd_stats, "training samples and token-level error rate")
    p.add_argument("--input", type=Path, required=True, help="tokenized JSONL")
    p.add_argument("--output", type=Path)

    p = command("train", cmd_train, "train one tagger")
    p.add_argument("--input", type=Path, required=True, help="tokenized JSONL")
    p.add_argument("--bpe", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    _add_mixup_args(p)
    _add_train_args(p)

    p = command("evaluate", cmd_evaluate, "score a checkpoint")
    p.add_argument("--input", type=Path, required=True, help="tokenized JSONL")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pad-id", type=int, default=0)

    p = command("compare", cmd_compare, "paired mixup / no-mixup runs over seeds")
    p.add_argument("--input", type=Path, required=True, help="tokenized JSONL")
    p.add_argument("--bpe", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True, help="output directory")
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2, 3, 4, 5])
    _add_model_args(p)
    _add_mixup_args(p, toggle=False)
    _add_train_args(p)

    p = command("sweep-alpha", cmd_sweep_alpha, "wrongly-tagged counts across alpha values")
    p.add_argument("--input", type=Path, required=True, help="tokenized JSONL")
    p.add_argument("--bpe", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True, help="output directory")
    p.add_argument("--alphas", type=_csv_list(float), default=[0.05, 0.1, 0.2, 0.4, 1.0])
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    _add_model_args(p)
    p.set_defaults(fixed_lambda=None)
    _add_train_args(p)
    return parser


def _apply_config(parser, args):
    if args.config is None:
        return
    try:
        overrides = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config: {exc}")
    if not isinstance(overrides, dict):
        parser.error("--config must hold a JSON object")
    allowed = set(vars(args)) - {"func", "config", "verbose", "command"}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in allowed:
            parser.error(f"unknown config key {key!r}")
        current = getattr(args, dest)
        if isinstance(current, Path):
            value = Path(value)
        setattr(args, dest, value)


# ------------------------------------------------------------------ helpers

def _model_cfg(args, vocab_size: int) -> M.ModelConfig:
    return M.ModelConfig(vocab_size=vocab_size, d_model=args.d_model, n_layers=args.n_layers,
                         n_heads=args.n_heads, d_ff=args.d_ff, max_len=args.max_len,
                         dropout=args.dropout)


def _train_cfg(args, seed: int = 0) -> training.TrainConfig:
    return training.TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.learning_rate,
        adam_beta1=args.adam_beta1, adam_beta2=args.adam_beta2, adam_eps=args.adam_eps,
        grad_clip_norm=args.grad_clip_norm, seed=seed,
        early_stop_patience=args.early_stop_patience, threshold=args.threshold)


def _load_splits(path: Path, split_seed: int) -> training.DatasetSplits:
    examples = tokenizer.read_tokenized(path)
    return training.DatasetSplits(*training.split_dataset(examples, training.SplitSpec(seed=split_seed)))


def _hypotheses(path: Path):
    for lineno, line in alignment.iter_jsonl(path):
        try:
            rec = json.loads(line)
            yield rec["hypothesis"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise InvalidInputError(f"line {lineno}: no hypothesis field") from None


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> None:
    cfg = corpusgen.GenConfig(
        n_utterances=args.n_utterances, disfluency_rate=args.disfluency_rate,
        filler_prob=args.filler_prob, repetition_prob=args.repetition_prob,
        false_start_prob=args.false_start_prob, sub_rate=args.sub_rate,
        del_rate=args.del_rate, ins_rate=args.ins_rate, seed=args.seed)
    corpusgen.generate_corpus(cfg, args.output)
    _write_manifest(_file_manifest(args.output), "generate",
                    {"gen_config": asdict(cfg), "output": str(args.output)})


def cmd_label(args) -> None:
    labeled = alignment.label_corpus(args.input, normalize=args.normalize,
                                     lowercase=args.normalize and args.lowercase)
    alignment.write_labeled(labeled, args.output)
    _write_manifest(_file_manifest(args.output), "label", _resolved(args))


def cmd_train_bpe(args) -> None:
    model = tokenizer.train_bpe(_hypotheses(args.input), args.vocab_size)
    model.save(args.output)
    _write_manifest(_file_manifest(args.output), "train-bpe",
                    {**_resolved(args), "n_merges": len(model.merges),
                     "n_vocab": len(model.vocab)})


def cmd_tokenize(args) -> None:
    bpe = tokenizer.BpeModel.load(args.bpe)
    labeled = alignment.read_labeled(args.input)
    tokenizer.write_tokenized((tokenizer.tokenize_utterance(bpe, u, args.max_len)
                               for u in labeled), args.output)
    _write_manifest(_file_manifest(args.output), "tokenize", _resolved(args))


def cmd_stats(args) -> None:
    stats = evaluation.corpus_stats(tokenizer.read_tokenized(args.input))
    text = _dump(asdict(stats))
    if args.output:
        args.output.write_text(text, encoding="utf-8")
        _write_manifest(_file_manifest(args.output), "stats", _resolved(args))
    sys.stdout.write(text)


def cmd_train(args) -> None:
    bpe = tokenizer.BpeModel.load(args.bpe)
    splits = _load_splits(args.input, args.split_seed)
    mcfg = _model_cfg(args, len(bpe.vocab))
    xcfg = M.MixupConfig(enabled=args.mixup, alpha=args.alpha, seed=args.seed,
                         fixed_lambda=args.fixed_lambda)
    tcfg = _train_cfg(args, args.seed)
    result = training.train_run(splits, mcfg, xcfg, tcfg, pad_id=bpe.pad_id)
    training.write_run(args.output, result, {"split_seed": args.split_seed,
                                             "pad_id": bpe.pad_id})
    report = evaluation.evaluate(result.best_params, mcfg, splits.test, tcfg.threshold,
                                 seed=args.seed, pad_id=bpe.pad_id)
    (args.output / "report.json").write_text(_dump(report.to_dict()), encoding="utf-8")
    _write_manifest(args.output / "manifest.json", "train", _resolved(args))


def cmd_evaluate(args) -> None:
    ckpt = M.load_checkpoint(args.checkpoint)
    examples = tokenizer.read_tokenized(args.input)
    if args.split != "all":
        parts = training.split_dataset(examples, training.SplitSpec(seed=args.split_seed))
        examples = parts[("train", "valid", "test").index(args.split)]
    report = evaluation.evaluate(ckpt.params, ckpt.model_config, examples, args.threshold,
                                 seed=ckpt.seed, pad_id=args.pad_id)
    args.output.write_text(_dump(report.to_dict()), encoding="utf-8")
    _write_manifest(_file_manifest(args.output), "evaluate", _resolved(args))


def _progress(arm, alpha, seed, report):
    log.info("%s alpha=%s seed=%d f1=%.4f wrongly_tagged=%d", arm, alpha, seed, report.f1,
             report.disfluencies_wrongly_tagged)


def cmd_compare(args) -> None:
    if len(args.seeds) < 2:
        raise UsageError("--seeds needs at least two seeds")
    bpe = tokenizer.BpeModel.load(args.bpe)
    splits = _load_splits(args.input, args.split_seed)
    mcfg = _model_cfg(args, len(bpe.vocab))
    xcfg = M.MixupConfig(alpha=args.alpha, fixed_lambda=args.fixed_lambda)
    result = evaluation.compare(splits, args.seeds, mcfg, xcfg, _train_cfg(args),
                                pad_id=bpe.pad_id, on_run=_progress)
    args.output.mkdir(parents=True, exist_ok=True)
    (args.output / "compare.json").write_text(_dump(result.to_dict()), encoding="utf-8")
    (args.output / "compare.csv").write_text(result.to_csv(), encoding="utf-8")
    _write_manifest(args.output / "manifest.json", "compare", _resolved(args))


def cmd_sweep_alpha(args) -> None:
    if not args.alphas:
        raise UsageError("--alphas needs at least one value")
    if len(args.seeds) < 2:
        raise UsageError("--seeds needs at least two seeds")
    bpe = tokenizer.BpeModel.load(args.bpe)
    splits = _load_splits(args.input, args.split_seed)
    mcfg = _model_cfg(args, len(bpe.vocab))
    result = evaluation.alpha_sweep(args.alphas, splits, mcfg, M.MixupConfig(), _train_cfg(args),
                                    args.seeds, pad_id=bpe.pad_id, on_run=_progress)
    args.output.mkdir(parents=True, exist_ok=True)
    (args.output / "sweep.csv").write_text(result.to_csv(), encoding="utf-8")
    (args.output / "sweep.json").write_text(_dump(result.to_dict()), encoding="utf-8")
    _write_manifest(args.output / "manifest.json", "sweep-alpha", _resolved(args))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, InvalidConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"asrmix {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, NonFiniteGradientError, OSError) as exc:
        print(f"asrmix {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
