"""Seeded training harness: splitting, batching, Adam, epoch loop, run dirs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import model as M
from .errors import InvalidConfigError, InvalidInputError, NonFiniteGradientError
from .tokenizer import TokenizedExample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    seed: int = 0
    early_stop_patience: int = 5
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("batch_size", "epochs", "learning_rate", "adam_eps", "grad_clip_norm",
                     "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InvalidConfigError("Adam betas must lie in (0, 1)")
        if not 0 < self.threshold < 1:
            raise InvalidConfigError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (8, 1, 1)
    seed: int = 0


@dataclass
class DatasetSplits:
    train: list[TokenizedExample]
    valid: list[TokenizedExample]
    test: list[TokenizedExample]


def split_dataset(examples: Sequence, spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then contiguous train/valid/test blocks.

    Valid and test get ``floor(n * r / total)`` items each; the remainder
    goes to train.
    """
    n = len(examples)
    if n < 10:
        raise InvalidInputError(f"need at least 10 examples to split, got {n}")
    total = sum(spec.ratios)
    n_valid = n * spec.ratios[1] // total
    n_test = n * spec.ratios[2] // total
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [examples[i] for i in order]
    n_train = n - n_valid - n_test
    return (shuffled[:n_train], shuffled[n_train:n_train + n_valid],
            shuffled[n_train + n_valid:])


def pad_batch(examples: Sequence[TokenizedExample], pad_id: int) -> M.Batch:
    b = len(examples)
    t = max((len(ex) for ex in examples), default=0)
    ids = np.full((b, t), pad_id, dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    labels = np.zeros((b, t), dtype=np.float64)
    flags = np.zeros((b, t), dtype=np.int64)
    for r, ex in enumerate(examples):
        n = len(ex)
        ids[r, :n] = ex.token_ids
        mask[r, :n] = True
        labels[r, :n] = ex.error_labels
        flags[r, :n] = ex.disfluency_flags
    return M.Batch(ids, mask, labels, flags, [ex.utterance_id for ex in examples])


def make_batches(examples: Sequence[TokenizedExample], batch_size: int, pad_id: int,
                 rng: np.random.Generator | None = None) -> Iterator[M.Batch]:
    """Padded batches in shuffled order (original order when ``rng`` is None)."""
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield pad_batch([examples[i] for i in order[start:start + batch_size]], pad_id)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if not np.isfinite(norm):
        raise NonFiniteGradientError("non-finite gradient encountered")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """Clip, then apply one bias-corrected Adam update in place."""
    grads, _ = clip_by_global_norm(grads, cfg.grad_clip_norm)
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)
    return params, state


@dataclass
class RunResult:
    best_params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int
    steps: int
    model_config: M.ModelConfig
    mixup_config: M.MixupConfig
    train_config: TrainConfig

    def best_checkpoint(self) -> bytes:
        return M.checkpoint_bytes(self.best_params, self.model_config, self.mixup_config,
                                  self.train_config.seed, self.steps,
                                  {"best_epoch": self.best_epoch})

    def final_checkpoint(self) -> bytes:
        return M.checkpoint_bytes(self.final_params, self.model_config, self.mixup_config,
                                  self.train_config.seed, self.steps)


def train_run(splits: DatasetSplits, model_cfg: M.ModelConfig, mixup_cfg: M.MixupConfig,
              train_cfg: TrainConfig, pad_id: int = 0) -> RunResult:
    """Train one model, keeping the parameters with the best validation F1.

    Randomness comes from three independent streams derived from the seeds
    (init, batching/dropout, mixup), so turning mixup on or pinning lambda
    never perturbs the other streams.
    """
    from .evaluation import evaluate  # evaluation imports this module

    if not splits.train:
        raise InvalidInputError("training split is empty")
    seed = train_cfg.seed
    params = M.init_params(model_cfg, seed=seed)
    data_rng = np.random.default_rng([seed, 1])
    mix_rng = np.random.default_rng([mixup_cfg.seed, 2])
    state = AdamState()
    history: list[dict] = []
    best_f1, best_epoch, best_params = -1.0, 0, None
    stale = 0
    for epoch in range(1, train_cfg.epochs + 1):
        total, n_tok = 0.0, 0
        for batch in make_batches(splits.train, train_cfg.batch_size, pad_id, data_rng):
            draw = M.draw_mixup(mixup_cfg, batch.pad_mask, mix_rng) if mixup_cfg.enabled else None
            loss, grads = M.loss_and_grads(params, model_cfg, batch, draw=draw, rng=data_rng)
            adam_step(params, grads, state, train_cfg)
            k = int(batch.pad_mask.sum())
            total += loss * k
            n_tok += k
        record = {"epoch": epoch, "train_loss": total / max(n_tok, 1), "step": state.step}
        if splits.valid:
            rep = evaluate(params, model_cfg, splits.valid, train_cfg.threshold, seed=seed,
                           pad_id=pad_id)
            record.update(valid_precision=rep.precision, valid_recall=rep.recall,
                          valid_f1=rep.f1,
                          valid_disfluencies_wrongly_tagged=rep.disfluencies_wrongly_tagged)
            f1 = rep.f1
        else:
            f1 = -record["train_loss"]
        history.append(record)
        log.info("epoch %d loss %.4f f1 %.4f", epoch, record["train_loss"], f1)
        if f1 > best_f1:
            best_f1, best_epoch, stale = f1, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= train_cfg.early_stop_patience:
                break
    return RunResult(best_params, params, history, best_epoch, state.step,
                     model_cfg, mixup_cfg, train_cfg)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_run(run_dir: str | Path, result: RunResult, extra_config: dict | None = None) -> None:
    """config.json, history.jsonl, best.ckpt and final.ckpt."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = {
        "model": asdict(result.model_config),
        "mixup": asdict(result.mixup_config),
        "train": asdict(result.train_config),
        "seed": result.train_config.seed,
        "best_epoch": result.best_epoch,
    }
    if extra_config:
        config.update(extra_config)
    (run_dir / "config.json").write_text(_dump(config), encoding="utf-8")
    with open(run_dir / "history.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (run_dir / "best.ckpt").write_bytes(result.best_checkpoint())
    (run_dir / "final.ckpt").write_bytes(result.final_checkpoint())
