"""Transformer token tagger with within-sequence hidden-state mixup.

Everything is plain numpy with explicit backward passes. Parameters live in
a flat ``dict[str, ndarray]``; the compute dtype follows the parameter
dtype, so the same code trains in float32 and is gradient-checked in float64.

Batch tensors are ``[batch, time]`` (ids, masks, labels) and
``[batch, time, d_model]`` (hidden states).
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

LN_EPS = 1e-5
MASK_NEG = -1e9
CHECKPOINT_FORMAT = "asrmix-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise InvalidConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise InvalidConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class MixupConfig:
    enabled: bool = True
    alpha: float = 0.2
    granularity: str = "per_sequence"
    seed: int = 0
    # testing hook: pin every draw to this value instead of sampling
    fixed_lambda: float | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidConfigError(f"alpha must be positive, got {self.alpha}")
        if self.granularity != "per_sequence":
            raise InvalidConfigError(f"unsupported lambda granularity {self.granularity!r}")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise InvalidConfigError("fixed_lambda must lie in [0, 1]")


@dataclass
class MixupDraw:
    """Per-sequence mixing weights and source-index permutations."""

    lambdas: np.ndarray  # [B]
    perms: np.ndarray  # [B, T], identity on pad positions

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perms)
        rows = np.arange(self.perms.shape[0])[:, None]
        inv[rows, self.perms] = np.arange(self.perms.shape[1])[None, :]
        return inv


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff

    def linear(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    p: dict[str, Any] = {"tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d))}
    for l in range(cfg.n_layers):
        for name in ("q", "k", "v", "o"):
            p[f"l{l}.w{name}"] = linear(d, d)
            p[f"l{l}.b{name}"] = np.zeros(d)
        p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"] = np.ones(d), np.zeros(d)
        p[f"l{l}.w1"], p[f"l{l}.b1"] = linear(d, f), np.zeros(f)
        p[f"l{l}.w2"], p[f"l{l}.b2"] = linear(f, d), np.zeros(d)
        p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"] = np.ones(d), np.zeros(d)
    p["head.w"] = np.zeros(d)
    p["head.b"] = np.zeros(1)
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _as_batch(token_ids, pad_mask):
    ids = np.asarray(token_ids)
    mask = np.asarray(pad_mask, dtype=bool)
    single = ids.ndim == 1
    if single:
        ids, mask = ids[None, :], mask[None, :]
    if ids.shape != mask.shape:
        raise InvalidInputError(f"token_ids {ids.shape} and pad_mask {mask.shape} differ")
    return ids, mask, single


def _check_inputs(cfg: ModelConfig, ids: np.ndarray):
    if ids.shape[1] > cfg.max_len:
        raise InvalidInputError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InvalidInputError("token id outside the vocabulary")


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    n = xhat.shape[-1]
    dxhat = dy * g
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, n).sum(0)
    db = dy.reshape(-1, n).sum(0)
    return dx, dg, db


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def forward_encoder(params, cfg: ModelConfig, token_ids, pad_mask, *, rng=None,
                    return_cache: bool = False):
    """Hidden states for a batch (or a single sequence).

    Dropout is active only when ``rng`` is given. Pad keys are masked out of
    every attention row, and pad queries get an all-zero attention row, so
    pad content never reaches real positions.
    """
    ids, mask, single = _as_batch(token_ids, pad_mask)
    _check_inputs(cfg, ids)
    dtype = params["tok_emb"].dtype
    t = ids.shape[1]
    h = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.d_model // h)
    maskf = mask.astype(dtype)
    key_bias = ((1.0 - maskf) * MASK_NEG)[:, None, None, :]
    qmask = maskf[:, None, :, None]

    x = params["tok_emb"][ids] + sinusoidal_positions(t, cfg.d_model).astype(dtype)
    caches = []
    for l in range(cfg.n_layers):
        P = lambda name: params[f"l{l}.{name}"]  # noqa: E731
        c: dict[str, Any] = {"x": x}
        q = _split_heads(x @ P("wq") + P("bq"), h)
        k = _split_heads(x @ P("wk") + P("bk"), h)
        v = _split_heads(x @ P("wv") + P("bv"), h)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale + key_bias
        s = s - s.max(-1, keepdims=True)
        a = np.exp(s)
        a = a / a.sum(-1, keepdims=True) * qmask
        ctx = _merge_heads(a @ v)
        attn, c["drop1"] = _dropout(ctx @ P("wo") + P("bo"), cfg.dropout, rng)
        x1, c["ln1"] = _layer_norm(x + attn, P("ln1_g"), P("ln1_b"))
        pre = x1 @ P("w1") + P("b1")
        act = np.maximum(pre, 0.0)
        ff, c["drop2"] = _dropout(act @ P("w2") + P("b2"), cfg.dropout, rng)
        x, c["ln2"] = _layer_norm(x1 + ff, P("ln2_g"), P("ln2_b"))
        c.update(q=q, k=k, v=v, a=a, ctx=ctx, x1=x1, pre=pre, act=act)
        caches.append(c)

    out = x[0] if single else x
    if return_cache:
        return out, {"ids": ids, "layers": caches, "scale": scale, "qmask": qmask}
    return out


def backward_encoder(params, cfg: ModelConfig, dH, cache) -> dict[str, np.ndarray]:
    grads = {k: np.zeros_like(v) for k, v in params.items() if k.startswith(("tok_emb", "l"))}
    h = cfg.n_heads
    scale, qmask = cache["scale"], cache["qmask"]
    dx = dH
    for l in reversed(range(cfg.n_layers)):
        P = lambda name: params[f"l{l}.{name}"]  # noqa: E731
        c = cache["layers"][l]
        g = lambda name: f"l{l}.{name}"  # noqa: E731
        d_res2, grads[g("ln2_g")], grads[g("ln2_b")] = _layer_norm_back(dx, P("ln2_g"), c["ln2"])
        dff = d_res2 if c["drop2"] is None else d_res2 * c["drop2"]
        d_model = dff.shape[-1]
        grads[g("w2")] = c["act"].reshape(-1, c["act"].shape[-1]).T @ dff.reshape(-1, d_model)
        grads[g("b2")] = dff.reshape(-1, d_model).sum(0)
        dact = dff @ P("w2").T
        dpre = dact * (c["pre"] > 0)
        grads[g("w1")] = c["x1"].reshape(-1, d_model).T @ dpre.reshape(-1, dpre.shape[-1])
        grads[g("b1")] = dpre.reshape(-1, dpre.shape[-1]).sum(0)
        dx1 = d_res2 + dpre @ P("w1").T

        d_res1, grads[g("ln1_g")], grads[g("ln1_b")] = _layer_norm_back(dx1, P("ln1_g"), c["ln1"])
        dattn = d_res1 if c["drop1"] is None else d_res1 * c["drop1"]
        grads[g("wo")] = c["ctx"].reshape(-1, d_model).T @ dattn.reshape(-1, d_model)
        grads[g("bo")] = dattn.reshape(-1, d_model).sum(0)
        dctx = _split_heads(dattn @ P("wo").T, h)
        a, q, k, v = c["a"], c["q"], c["k"], c["v"]
        dv = a.transpose(0, 1, 3, 2) @ dctx
        da = (dctx @ v.transpose(0, 1, 3, 2)) * qmask
        ds = a * (da - (da * a).sum(-1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        x_in = c["x"].reshape(-1, d_model)
        dx = d_res1
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dflat = _merge_heads(dproj)
            grads[g(f"w{name}")] = x_in.T @ dflat.reshape(-1, d_model)
            grads[g(f"b{name}")] = dflat.reshape(-1, d_model).sum(0)
            dx = dx + dflat @ P(f"w{name}").T
    demb = np.zeros_like(params["tok_emb"])
    np.add.at(demb, cache["ids"].reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["tok_emb"] = demb
    return grads


def tch_forward(params, h: np.ndarray) -> np.ndarray:
    """Position-wise affine map to one logit per token."""
    return h @ params["head.w"] + params["head.b"][0]


def sample_lambda(cfg: MixupConfig, rng: np.random.Generator) -> float:
    if not cfg.alpha > 0:
        raise InvalidConfigError(f"alpha must be positive, got {cfg.alpha}")
    if cfg.fixed_lambda is not None:
        return float(cfg.fixed_lambda)
    return float(rng.beta(cfg.alpha, cfg.alpha))


def sample_permutation(pad_mask, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of the real positions; pads map to themselves."""
    mask = np.asarray(pad_mask, dtype=bool)
    perm = np.arange(mask.shape[0])
    real = np.flatnonzero(mask)
    perm[real] = rng.permutation(real)
    return perm


def draw_mixup(cfg: MixupConfig, pad_mask, rng: np.random.Generator) -> MixupDraw:
    mask = np.asarray(pad_mask, dtype=bool)
    lams, perms = [], []
    for row in mask:
        lams.append(sample_lambda(cfg, rng))
        perms.append(sample_permutation(row, rng))
    return MixupDraw(np.array(lams), np.array(perms, dtype=np.int64).reshape(mask.shape))


def mix_batch(H: np.ndarray, Y: np.ndarray, pad_mask, draw: MixupDraw):
    """Interpolate each sequence's states and labels with a shuffled copy."""
    mask = np.asarray(pad_mask, dtype=bool)
    lam = draw.lambdas.astype(H.dtype)
    h_shuf = np.take_along_axis(H, draw.perms[:, :, None], axis=1)
    y_shuf = np.take_along_axis(Y, draw.perms, axis=1)
    h_new = lam[:, None, None] * H + (1.0 - lam)[:, None, None] * h_shuf
    y_new = lam[:, None] * Y + (1.0 - lam)[:, None] * y_shuf
    h_new = np.where(mask[:, :, None], h_new, H)
    y_new = np.where(mask, y_new, 0.0)
    return h_new, y_new


def unmix_grad(dH_new: np.ndarray, pad_mask, draw: MixupDraw) -> np.ndarray:
    """Gradient w.r.t. the pre-mixup states.

    Row i collects lambda * dH_new[i] directly plus (1 - lambda) times the
    gradient of the row that read it as its shuffled partner.
    """
    mask = np.asarray(pad_mask, dtype=bool)
    lam = draw.lambdas.astype(dH_new.dtype)
    real = np.where(mask[:, :, None], dH_new, 0.0)
    from_partner = np.take_along_axis(real, draw.inverse[:, :, None], axis=1)
    dH = lam[:, None, None] * real + (1.0 - lam)[:, None, None] * from_partner
    return np.where(mask[:, :, None], dH, dH_new)


def mixup_layer(h, y, pad_mask, cfg: MixupConfig, rng: np.random.Generator,
                lam: float | None = None, perm=None):
    """Mix one sequence's hidden states and labels with a permuted copy.

    Returns ``(h_new, y_new, perm)``. ``lam`` and ``perm`` may be pinned;
    otherwise they are drawn from ``rng``.
    """
    h = np.asarray(h)
    y = np.asarray(y, dtype=h.dtype if h.dtype.kind == "f" else np.float64)
    mask = np.asarray(pad_mask, dtype=bool)
    if not (h.shape[0] == y.shape[0] == mask.shape[0]):
        raise InvalidInputError("h, y and pad_mask must have the same length")
    if lam is None:
        lam = sample_lambda(cfg, rng)
    if perm is None:
        perm = sample_permutation(mask, rng)
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(len(perm))):
        raise InvalidInputError("perm is not a permutation")
    if np.any(perm[~mask] != np.flatnonzero(~mask)) or np.any(~mask[perm[mask]]):
        raise InvalidInputError("perm must map real positions among themselves")
    draw = MixupDraw(np.array([lam]), perm[None, :])
    h_new, y_new = mix_batch(h[None], y[None], mask[None], draw)
    return h_new[0], y_new[0], perm


def bce_loss(logits, targets, pad_mask) -> float:
    """Mean binary cross-entropy over real tokens, from logits."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(pad_mask, dtype=bool)
    if z.shape != t.shape or z.shape != mask.shape:
        raise InvalidInputError("logits, targets and pad_mask must share a shape")
    if np.any((t < 0) | (t > 1)):
        raise InvalidInputError("targets must lie in [0, 1]")
    n = mask.sum()
    if n == 0:
        return 0.0
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per[mask].sum() / n)


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Batch:
    token_ids: np.ndarray  # [B, T] int
    pad_mask: np.ndarray  # [B, T] bool
    error_labels: np.ndarray  # [B, T] float
    disfluency_flags: np.ndarray  # [B, T] int
    utterance_ids: list[str] = field(default_factory=list)


def loss_and_grads(params, cfg: ModelConfig, batch: Batch, draw: MixupDraw | None = None,
                   rng: np.random.Generator | None = None):
    """Forward + backward for one batch.

    ``draw`` switches the mixup layer on; ``rng`` switches dropout on.
    Returns ``(loss, grads)``.
    """
    mask = batch.pad_mask
    dtype = params["tok_emb"].dtype
    H, cache = forward_encoder(params, cfg, batch.token_ids, mask, rng=rng, return_cache=True)
    Y = batch.error_labels.astype(dtype)
    if draw is not None:
        H_in, Y = mix_batch(H, Y, mask, draw)
    else:
        H_in = H
    z = tch_forward(params, H_in)
    loss = bce_loss(z, Y, mask)

    n = max(int(mask.sum()), 1)
    dz = np.where(mask, sigmoid(z) - Y, 0.0).astype(dtype) / dtype.type(n)
    grads = {
        "head.w": H_in.reshape(-1, H_in.shape[-1]).T @ dz.reshape(-1),
        "head.b": np.array([dz.sum()], dtype=dtype),
    }
    dH = dz[:, :, None] * params["head.w"]
    if draw is not None:
        dH = unmix_grad(dH, mask, draw)
    grads.update(backward_encoder(params, cfg, dH, cache))
    return loss, {k: grads[k] for k in params}


def backward(params, batch: Batch, cfg: ModelConfig, mixup_cfg: MixupConfig | None = None,
             draw: MixupDraw | None = None, rng=None) -> dict[str, np.ndarray]:
    """Exact gradients of the batch loss, drawing mixup from ``mixup_cfg`` if enabled."""
    if draw is None and mixup_cfg is not None and mixup_cfg.enabled:
        if rng is None:
            rng = np.random.default_rng(mixup_cfg.seed)
        draw = draw_mixup(mixup_cfg, batch.pad_mask, rng)
    return loss_and_grads(params, cfg, batch, draw=draw)[1]


def predict(params, cfg: ModelConfig, token_ids, pad_mask) -> np.ndarray:
    """Per-token error probabilities; no dropout, no mixup."""
    H = forward_encoder(params, cfg, token_ids, pad_mask)
    return sigmoid(tch_forward(params, H).astype(np.float64))


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"dtype": le.dtype.str, "shape": list(a.shape),
            "data": base64.b64encode(le.tobytes(order="C")).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def checkpoint_bytes(params, model_cfg: ModelConfig, mixup_cfg: MixupConfig,
                     seed: int, step: int, extra: dict | None = None) -> bytes:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model_cfg),
        "mixup_config": asdict(mixup_cfg),
        "seed": int(seed),
        "step": int(step),
        "params": {k: _encode_array(v) for k, v in params.items()},
    }
    if extra:
        doc["extra"] = extra
    return (json.dumps(doc, indent=1, sort_keys=False) + "\n").encode("utf-8")


def save_checkpoint(path: str | Path, params, model_cfg: ModelConfig, mixup_cfg: MixupConfig,
                    seed: int, step: int, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, model_cfg, mixup_cfg, seed, step, extra))


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    mixup_config: MixupConfig
    seed: int
    step: int
    extra: dict = field(default_factory=dict)


def parse_checkpoint(data: bytes) -> Checkpoint:
    doc = json.loads(data.decode("utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError("not an asrmix checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {doc.get('version')}")
    return Checkpoint(
        params={k: _decode_array(v) for k, v in doc["params"].items()},
        model_config=ModelConfig(**doc["model_config"]),
        mixup_config=MixupConfig(**doc["mixup_config"]),
        seed=doc["seed"],
        step=doc["step"],
        extra=doc.get("extra", {}),
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
