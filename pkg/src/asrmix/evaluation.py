"""Token-level metrics, seed aggregation, mixup comparisons and alpha sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .errors import InvalidInputError
from .tokenizer import TokenizedExample
from .training import DatasetSplits, TrainConfig, make_batches, train_run

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    f1: float
    disfluencies_wrongly_tagged: float
    n_tokens: float
    n_error_tokens: float
    threshold: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CorpusStats:
    training_samples: int
    token_level_error_rate: float
    n_tokens: int = 0
    n_error_tokens: int = 0


def _flatten(*arrays, pad_mask=None):
    arrs = [np.asarray(a) for a in arrays]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise InvalidInputError("inputs must all have the same length")
    if pad_mask is None:
        mask = np.ones(shape, dtype=bool)
    else:
        mask = np.asarray(pad_mask, dtype=bool)
        if mask.shape != shape:
            raise InvalidInputError("pad_mask length differs from the inputs")
    return [a[mask] for a in arrs]


def confusion(probs, labels, pad_mask=None, threshold: float = 0.5):
    probs, labels = _flatten(probs, labels, pad_mask=pad_mask)
    pred = probs >= threshold
    gold = labels.astype(bool)
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    tn = int(np.sum(~pred & ~gold))
    return tp, fp, fn, tn


def error_detection_f1(probs, labels, pad_mask=None, threshold: float = 0.5):
    """Precision, recall and F1 of the error class over real tokens.

    Any zero denominator yields 0 for that quantity.
    """
    if not 0 < threshold < 1:
        raise InvalidInputError("threshold must lie in (0, 1)")
    tp, fp, fn, _ = confusion(probs, labels, pad_mask, threshold)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    if p + r == 0:
        log.debug("degenerate F1: tp=%d fp=%d fn=%d", tp, fp, fn)
        return p, r, 0.0
    return p, r, 2 * p * r / (p + r)


def disfluencies_wrongly_tagged(probs, labels, disfluency_flags, pad_mask=None,
                                threshold: float = 0.5) -> int:
    """Correctly transcribed disfluent tokens that were predicted as errors."""
    probs, labels, flags = _flatten(probs, labels, disfluency_flags, pad_mask=pad_mask)
    return int(np.sum((flags == 1) & (labels == 0) & (probs >= threshold)))


def predict_examples(params, cfg: M.ModelConfig, examples: Sequence[TokenizedExample],
                     pad_id: int = 0, batch_size: int = 64):
    """Stack probabilities, labels, flags and masks over a dataset."""
    out = {"probs": [], "labels": [], "flags": [], "mask": []}
    width = max((len(ex) for ex in examples), default=0)
    for batch in make_batches(examples, batch_size, pad_id):
        probs = M.predict(params, cfg, batch.token_ids, batch.pad_mask)
        pad = width - batch.token_ids.shape[1]
        padded = lambda a: np.pad(a, ((0, 0), (0, pad)))  # noqa: E731
        out["probs"].append(padded(probs))
        out["labels"].append(padded(batch.error_labels))
        out["flags"].append(padded(batch.disfluency_flags))
        out["mask"].append(padded(batch.pad_mask))
    if not examples:
        return {k: np.zeros((0, 0)) for k in out}
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate(params, cfg: M.ModelConfig, examples: Sequence[TokenizedExample],
             threshold: float = 0.5, seed: int = 0, pad_id: int = 0) -> EvalReport:
    arrays = predict_examples(params, cfg, examples, pad_id)
    mask = arrays["mask"].astype(bool)
    p, r, f1 = error_detection_f1(arrays["probs"], arrays["labels"], mask, threshold)
    wrong = disfluencies_wrongly_tagged(arrays["probs"], arrays["labels"], arrays["flags"],
                                        mask, threshold)
    return EvalReport(
        precision=p, recall=r, f1=f1, disfluencies_wrongly_tagged=wrong,
        n_tokens=int(mask.sum()), n_error_tokens=int(arrays["labels"][mask].sum()),
        threshold=threshold, seed=seed,
    )


_NUMERIC = ("precision", "recall", "f1", "disfluencies_wrongly_tagged", "n_tokens",
            "n_error_tokens")


@dataclass(frozen=True)
class AggregateReport:
    mean: EvalReport
    variance: dict[str, float]
    n_runs: int
    seeds: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"mean": self.mean.to_dict(), "variance": dict(self.variance),
                "n_runs": self.n_runs, "seeds": list(self.seeds)}


def aggregate(reports: Sequence[EvalReport]) -> AggregateReport:
    """Per-field mean and sample variance (zero for a single report)."""
    if not reports:
        raise InvalidInputError("cannot aggregate an empty list of reports")
    thresholds = {r.threshold for r in reports}
    if len(thresholds) > 1:
        raise InvalidInputError(f"reports use different thresholds: {sorted(thresholds)}")
    means, variances = {}, {}
    for name in _NUMERIC:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        means[name] = float(vals.mean())
        variances[name] = float(vals.var(ddof=1)) if len(vals) > 1 else 0.0
    mean = EvalReport(**means, threshold=reports[0].threshold, seed=reports[0].seed)
    return AggregateReport(mean, variances, len(reports), tuple(r.seed for r in reports))


def corpus_stats(examples: Sequence[TokenizedExample]) -> CorpusStats:
    if not examples:
        raise InvalidInputError("corpus is empty")
    n_tok = sum(len(ex) for ex in examples)
    n_err = sum(sum(ex.error_labels) for ex in examples)
    return CorpusStats(len(examples), n_err / n_tok if n_tok else 0.0, n_tok, n_err)


RunHook = Callable[[str, float | None, int, EvalReport], None]


def run_and_evaluate(splits: DatasetSplits, model_cfg: M.ModelConfig, mixup_cfg: M.MixupConfig,
                     train_cfg: TrainConfig, pad_id: int = 0):
    """Train one arm and score its best-validation checkpoint on the test split."""
    result = train_run(splits, model_cfg, mixup_cfg, train_cfg, pad_id=pad_id)
    report = evaluate(result.best_params, model_cfg, splits.test, train_cfg.threshold,
                      seed=train_cfg.seed, pad_id=pad_id)
    return result, report


@dataclass
class Comparison:
    seeds: list[int]
    mixup: list[EvalReport]
    no_mixup: list[EvalReport]

    @property
    def mixup_agg(self) -> AggregateReport:
        return aggregate(self.mixup)

    @property
    def no_mixup_agg(self) -> AggregateReport:
        return aggregate(self.no_mixup)

    def table(self) -> list[dict]:
        """Rows of the four-column mixup / no-mixup table."""
        rows = []
        for seed, a, b in zip(self.seeds, self.mixup, self.no_mixup):
            rows.append({"row": f"seed={seed}", "f1_mixup": a.f1, "f1_no_mixup": b.f1,
                         "wrongly_tagged_mixup": a.disfluencies_wrongly_tagged,
                         "wrongly_tagged_no_mixup": b.disfluencies_wrongly_tagged})
        ma, mb = self.mixup_agg, self.no_mixup_agg
        rows.append({"row": "mean", "f1_mixup": ma.mean.f1, "f1_no_mixup": mb.mean.f1,
                     "wrongly_tagged_mixup": ma.mean.disfluencies_wrongly_tagged,
                     "wrongly_tagged_no_mixup": mb.mean.disfluencies_wrongly_tagged})
        rows.append({"row": "variance", "f1_mixup": ma.variance["f1"],
                     "f1_no_mixup": mb.variance["f1"],
                     "wrongly_tagged_mixup": ma.variance["disfluencies_wrongly_tagged"],
                     "wrongly_tagged_no_mixup": mb.variance["disfluencies_wrongly_tagged"]})
        return rows

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "mixup": {"runs": [r.to_dict() for r in self.mixup], **self.mixup_agg.to_dict()},
            "no_mixup": {"runs": [r.to_dict() for r in self.no_mixup],
                         **self.no_mixup_agg.to_dict()},
            "table": self.table(),
        }

    def to_csv(self) -> str:
        cols = ["row", "f1_mixup", "f1_no_mixup", "wrongly_tagged_mixup", "wrongly_tagged_no_mixup"]
        return _csv(cols, self.table())


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in columns})
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def compare(splits: DatasetSplits, seeds: Sequence[int], model_cfg: M.ModelConfig,
            mixup_cfg: M.MixupConfig, train_cfg: TrainConfig, pad_id: int = 0,
            on_run: RunHook | None = None) -> Comparison:
    """Paired mixup / no-mixup training for every seed."""
    if len(seeds) < 2:
        raise InvalidInputError("compare needs at least two seeds")
    on, off = [], []
    for seed in seeds:
        tcfg = replace(train_cfg, seed=seed)
        for arm, bucket in (("mixup", on), ("no_mixup", off)):
            mcfg = replace(mixup_cfg, enabled=arm == "mixup", seed=seed)
            _, report = run_and_evaluate(splits, model_cfg, mcfg, tcfg, pad_id)
            bucket.append(report)
            if on_run:
                on_run(arm, mcfg.alpha if mcfg.enabled else None, seed, report)
    return Comparison(list(seeds), on, off)


SWEEP_COLUMNS = ["alpha", "seed_count", "mean_wrongly_tagged", "variance", "normalized_mean",
                 "mean_f1", "normalized_variance", "band_low", "band_high"]


@dataclass
class SweepResult:
    rows: list[dict]
    baseline: AggregateReport

    def to_csv(self) -> str:
        return _csv(SWEEP_COLUMNS, self.rows)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "baseline": self.baseline.to_dict()}


def _normalize(value: float, base: float) -> float:
    return value / base if base else float("nan")


def alpha_sweep(alphas: Sequence[float], splits: DatasetSplits, model_cfg: M.ModelConfig,
                mixup_cfg: M.MixupConfig, train_cfg: TrainConfig, seeds: Sequence[int],
                pad_id: int = 0, on_run: RunHook | None = None,
                baseline: Sequence[EvalReport] | None = None) -> SweepResult:
    """Wrongly-tagged counts per alpha, normalized by the no-mixup mean.

    Besides one mixup run per (alpha, seed), a no-mixup run per seed
    provides the normalizer unless ``baseline`` reports are supplied. The
    band columns are the normalized mean +/- one normalized variance.
    """
    if not alphas:
        raise InvalidInputError("alpha sweep needs at least one alpha")
    if len(seeds) < 2:
        raise InvalidInputError("alpha sweep needs at least two seeds")
    if baseline is None:
        baseline = []
        for seed in seeds:
            mcfg = replace(mixup_cfg, enabled=False, seed=seed)
            _, rep = run_and_evaluate(splits, model_cfg, mcfg, replace(train_cfg, seed=seed),
                                      pad_id)
            baseline.append(rep)
            if on_run:
                on_run("baseline", None, seed, rep)
    base = aggregate(baseline)
    base_mean = base.mean.disfluencies_wrongly_tagged
    rows = []
    for alpha in alphas:
        reports = []
        for seed in seeds:
            mcfg = replace(mixup_cfg, enabled=True, alpha=alpha, seed=seed)
            _, rep = run_and_evaluate(splits, model_cfg, mcfg, replace(train_cfg, seed=seed),
                                      pad_id)
            reports.append(rep)
            if on_run:
                on_run("mixup", alpha, seed, rep)
        agg = aggregate(reports)
        mean = agg.mean.disfluencies_wrongly_tagged
        var = agg.variance["disfluencies_wrongly_tagged"]
        norm_mean = _normalize(mean, base_mean)
        norm_var = _normalize(var, base_mean * base_mean)
        rows.append({
            "alpha": float(alpha), "seed_count": len(seeds), "mean_wrongly_tagged": mean,
            "variance": var, "normalized_mean": norm_mean, "mean_f1": agg.mean.f1,
            "normalized_variance": norm_var, "band_low": norm_mean - norm_var,
            "band_high": norm_mean + norm_var,
        })
    return SweepResult(rows, base)
