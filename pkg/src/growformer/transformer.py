"""Minimal transformer runtime: post-LN MLM encoder and pre-LN causal decoder.

Parameters live in a flat, ordered ``dict[str, np.ndarray]``. Matrices use the
(in, out) convention, so a projection is ``x @ W``. Attention projections are
laid out head-major: columns ``[h*d_k, (h+1)*d_k)`` of W^Q/W^K/W^V belong to
head ``h`` and so do the same rows of W^O.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import (
    DTYPE,
    SeededRng,
    gelu_grad,
    gelu_with_tanh,
    layer_norm_backward,
    layer_norm_with_stats,
    log_softmax_rows,
    matmul,
    softmax_rows,
)

ENCODER = "post-ln-encoder"
DECODER = "pre-ln-decoder"
VARIANTS = (ENCODER, DECODER)

PAD_ID, MASK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
N_SPECIAL = 4

_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    variant: str = ENCODER
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab: int = 64
    max_seq: int = 32
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.n_heads < 1 or self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible into {self.n_heads} heads")
        if self.vocab < 2 or self.d_ff < 1 or self.max_seq < 1:
            raise ValueError("vocab >= 2, d_ff >= 1 and max_seq >= 1 are required")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


LAYER_TENSORS = (
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln1.gain", "ln1.bias",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    "ln2.gain", "ln2.bias",
)


def layer_prefix(layer: int) -> str:
    return f"layers.{layer}."


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of a model, in canonical order."""
    D, F, V = config.hidden, config.d_ff, config.vocab
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (V, D),
        "embed.pos": (config.max_seq, D),
    }
    if config.variant == ENCODER:
        shapes["embed.ln.gain"] = (D,)
        shapes["embed.ln.bias"] = (D,)
    per_layer = {
        "attn.wq": (D, D), "attn.bq": (D,),
        "attn.wk": (D, D), "attn.bk": (D,),
        "attn.wv": (D, D), "attn.bv": (D,),
        "attn.wo": (D, D), "attn.bo": (D,),
        "ln1.gain": (D,), "ln1.bias": (D,),
        "ffn.w1": (D, F), "ffn.b1": (F,),
        "ffn.w2": (F, D), "ffn.b2": (D,),
        "ln2.gain": (D,), "ln2.bias": (D,),
    }
    for layer in range(config.n_layers):
        for name in LAYER_TENSORS:
            shapes[layer_prefix(layer) + name] = per_layer[name]
    if config.variant == DECODER:
        shapes["final_ln.gain"] = (D,)
        shapes["final_ln.bias"] = (D,)
    shapes["head.w"] = (D, V)
    shapes["head.b"] = (V,)
    return shapes


def check_params(config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(config)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, config expects {shape}")


def is_bias_like(name: str) -> bool:
    return name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or name == "head.b"


def rand_init(config: ModelConfig, seed: int, std: float = 0.02) -> dict[str, np.ndarray]:
    """Truncated-normal weights, zero biases, unit LayerNorm gains."""
    rng = SeededRng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=DTYPE)
        elif is_bias_like(name):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            params[name] = rng.truncated_normal(shape, std=std)
    return params


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


@dataclass
class Batch:
    """Token ids plus per-position targets (``-1`` means "no loss here").

    ``kind`` is ``"mlm"`` (targets only at masked positions) or ``"lm"``
    (targets are the next token).
    """

    ids: np.ndarray
    targets: np.ndarray
    kind: str = "mlm"
    attention_mask: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.ids.ndim != 2 or self.targets.shape != self.ids.shape:
            raise ValueError("ids and targets must both be (batch, seq)")
        if self.kind not in ("mlm", "lm"):
            raise ValueError(f"unknown batch kind {self.kind!r}")
        if self.attention_mask is not None:
            self.attention_mask = np.asarray(self.attention_mask, dtype=bool)

    @classmethod
    def for_lm(cls, ids) -> "Batch":
        ids = np.asarray(ids, dtype=np.int64)
        targets = np.full_like(ids, -1)
        targets[:, :-1] = ids[:, 1:]
        return cls(ids, targets, kind="lm")


@dataclass
class ForwardResult:
    hidden: np.ndarray
    logits: np.ndarray
    cache: dict


def _check_batch(config: ModelConfig, batch: Batch) -> None:
    b, t = batch.ids.shape
    if t > config.max_seq:
        raise ValueError(f"sequence length {t} exceeds max_seq {config.max_seq}")
    if batch.ids.min(initial=0) < 0 or batch.ids.max(initial=0) >= config.vocab:
        raise ValueError("token id out of range for vocabulary")
    if batch.targets.max(initial=-1) >= config.vocab:
        raise ValueError("target id out of range for vocabulary")
    if batch.attention_mask is not None and batch.attention_mask.shape != batch.ids.shape:
        raise ValueError("attention mask must match ids shape")


def _attention_bias(config: ModelConfig, batch: Batch, dtype) -> np.ndarray | None:
    """Additive (B|1, 1, T, T) bias or None when nothing is masked."""
    t = batch.ids.shape[1]
    bias = None
    if config.variant == DECODER:
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)
        bias = np.where(causal, dtype(_NEG), dtype(0.0))[None, None]
    if batch.attention_mask is not None and not batch.attention_mask.all():
        keys = np.where(batch.attention_mask, dtype(0.0), dtype(_NEG))[:, None, None, :]
        bias = keys if bias is None else bias + keys
    return bias


def _mha_forward(x, p, pre, n_heads, attn_bias):
    b, t, d = x.shape
    dk = d // n_heads

    def heads(m):
        return m.reshape(b, t, n_heads, dk).transpose(0, 2, 1, 3)

    q = heads(matmul(x, p[pre + "attn.wq"]) + p[pre + "attn.bq"])
    k = heads(matmul(x, p[pre + "attn.wk"]) + p[pre + "attn.bk"])
    v = heads(matmul(x, p[pre + "attn.wv"]) + p[pre + "attn.bv"])
    scale = x.dtype.type(1.0 / math.sqrt(dk))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale
    if attn_bias is not None:
        scores = scores + attn_bias
    probs = softmax_rows(scores)
    ctx = matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = matmul(ctx, p[pre + "attn.wo"]) + p[pre + "attn.bo"]
    return out, {"x": x, "q": q, "k": k, "v": v, "probs": probs, "ctx": ctx, "scale": scale}


def _mha_backward(dout, c, p, pre, grads):
    x, q, k, v, probs, ctx, scale = c["x"], c["q"], c["k"], c["v"], c["probs"], c["ctx"], c["scale"]
    b, t, d = x.shape
    n_heads = q.shape[1]
    x2 = x.reshape(-1, d)
    dout2 = dout.reshape(-1, d)
    grads[pre + "attn.wo"] = ctx.reshape(-1, d).T @ dout2
    grads[pre + "attn.bo"] = dout2.sum(axis=0)
    dctx = (dout2 @ p[pre + "attn.wo"].T).reshape(b, t, n_heads, -1).transpose(0, 2, 1, 3)
    dprobs = matmul(dctx, v.transpose(0, 1, 3, 2))
    dv = matmul(probs.transpose(0, 1, 3, 2), dctx)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = matmul(dscores, k)
    dk_ = matmul(dscores.transpose(0, 1, 3, 2), q)
    dx = np.zeros_like(x2)
    for name, dh in (("q", dq), ("k", dk_), ("v", dv)):
        dflat = dh.transpose(0, 2, 1, 3).reshape(-1, d)
        grads[pre + f"attn.w{name}"] = x2.T @ dflat
        grads[pre + f"attn.b{name}"] = dflat.sum(axis=0)
        dx += dflat @ p[pre + f"attn.w{name}"].T
    return dx.reshape(b, t, d)


def _ffn_forward(x, p, pre):
    pre_act = matmul(x, p[pre + "ffn.w1"]) + p[pre + "ffn.b1"]
    act, tanh_term = gelu_with_tanh(pre_act)
    out = matmul(act, p[pre + "ffn.w2"]) + p[pre + "ffn.b2"]
    return out, {"x": x, "pre": pre_act, "act": act, "tanh": tanh_term}


def _ffn_backward(dout, c, p, pre, grads):
    x, pre_act, act = c["x"], c["pre"], c["act"]
    d = x.shape[-1]
    dout2 = dout.reshape(-1, dout.shape[-1])
    grads[pre + "ffn.w2"] = act.reshape(-1, act.shape[-1]).T @ dout2
    grads[pre + "ffn.b2"] = dout2.sum(axis=0)
    dact = dout2 @ p[pre + "ffn.w2"].T
    dpre = dact * gelu_grad(pre_act.reshape(dact.shape), c["tanh"].reshape(dact.shape))
    grads[pre + "ffn.w1"] = x.reshape(-1, d).T @ dpre
    grads[pre + "ffn.b1"] = dpre.sum(axis=0)
    return (dpre @ p[pre + "ffn.w1"].T).reshape(x.shape)


def _ln(x, p, name, eps):
    y, xhat, inv = layer_norm_with_stats(x, p[name + ".gain"], p[name + ".bias"], eps)
    return y, (xhat, inv)


def _ln_back(dy, c, p, name, grads):
    dx, dg, db = layer_norm_backward(dy, c[0], c[1], p[name + ".gain"])
    grads[name + ".gain"] = dg
    grads[name + ".bias"] = db
    return dx


def forward(config: ModelConfig, params: dict[str, np.ndarray], batch: Batch,
            depth: int | None = None) -> ForwardResult:
    """Run the bottom ``depth`` layers (all by default) and the output head."""
    _check_batch(config, batch)
    depth = config.n_layers if depth is None else depth
    if not 0 <= depth <= config.n_layers:
        raise ValueError(f"depth {depth} outside [0, {config.n_layers}]")
    p = params
    eps = config.ln_eps
    ids = batch.ids
    t = ids.shape[1]
    dtype = p["embed.tok"].dtype
    attn_bias = _attention_bias(config, batch, dtype.type)

    x = p["embed.tok"][ids] + p["embed.pos"][:t]
    cache: dict = {"depth": depth, "layers": []}
    if config.variant == ENCODER:
        x, cache["embed_ln"] = _ln(x, p, "embed.ln", eps)

    for layer in range(depth):
        pre = layer_prefix(layer)
        lc: dict = {}
        if config.variant == ENCODER:
            a, lc["mha"] = _mha_forward(x, p, pre, config.n_heads, attn_bias)
            x, lc["ln1"] = _ln(x + a, p, pre + "ln1", eps)
            f, lc["ffn"] = _ffn_forward(x, p, pre)
            x, lc["ln2"] = _ln(x + f, p, pre + "ln2", eps)
        else:
            h, lc["ln1"] = _ln(x, p, pre + "ln1", eps)
            a, lc["mha"] = _mha_forward(h, p, pre, config.n_heads, attn_bias)
            x = x + a
            h, lc["ln2"] = _ln(x, p, pre + "ln2", eps)
            f, lc["ffn"] = _ffn_forward(h, p, pre)
            x = x + f
        cache["layers"].append(lc)

    if config.variant == DECODER:
        x, cache["final_ln"] = _ln(x, p, "final_ln", eps)
    logits = matmul(x, p["head.w"]) + p["head.b"]
    return ForwardResult(hidden=x, logits=logits, cache=cache)


def _masked_ce(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over positions with target >= 0, and d(loss)/d(logits)."""
    sel = targets >= 0
    n = int(sel.sum())
    if n == 0:
        raise ValueError("batch has no labelled positions")
    logp = log_softmax_rows(logits[sel])
    tgt = targets[sel]
    loss = -logp[np.arange(n), tgt].astype(np.float64).mean()
    dsel = np.exp(logp)
    dsel[np.arange(n), tgt] -= 1
    dlogits = np.zeros_like(logits)
    dlogits[sel] = dsel / logits.dtype.type(n)
    return float(loss), dlogits


def mlm_loss(logits: np.ndarray, batch: Batch) -> float:
    """Mean cross-entropy over the masked positions."""
    if batch.kind != "mlm":
        raise ValueError("mlm_loss needs an MLM batch")
    return _masked_ce(logits, batch.targets)[0]


def lm_loss(logits: np.ndarray, batch: Batch) -> float:
    """Mean next-token cross-entropy; ``exp`` of it is the perplexity."""
    if batch.kind != "lm":
        raise ValueError("lm_loss needs a causal LM batch from the decoder variant")
    return _masked_ce(logits, batch.targets)[0]


def loss_for(config: ModelConfig, logits: np.ndarray, batch: Batch) -> float:
    if config.variant == DECODER:
        return lm_loss(logits, batch)
    return mlm_loss(logits, batch)


def backward(config: ModelConfig, params: dict[str, np.ndarray], batch: Batch, *,
             depth: int | None = None, frozen: Iterable[str] = (),
             scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for every parameter.

    Names in ``frozen`` get an all-zero gradient; the backward sweep stops
    early once nothing below the current layer needs a gradient. With
    ``depth`` set, only the bottom ``depth`` layers run (a sub-model sharing
    the head); gradients of unused layers are zero.
    """
    if (config.variant == DECODER) != (batch.kind == "lm"):
        raise ValueError(f"{config.variant} cannot be trained on a {batch.kind!r} batch")
    frozen = set(frozen)
    res = forward(config, params, batch, depth)
    loss, dlogits = _masked_ce(res.logits, batch.targets)
    if scale != 1.0:
        dlogits = dlogits * dlogits.dtype.type(scale)
        loss = loss * scale
    p = params
    cache = res.cache
    depth = cache["depth"]
    grads: dict[str, np.ndarray] = {}

    def needs_below(layer: int) -> bool:
        # anything in layers < layer, or the embedding, still wants a gradient
        for name in params:
            if name in frozen:
                continue
            if name.startswith("embed."):
                return True
            if name.startswith("layers."):
                idx = int(name.split(".")[1])
                if idx < layer:
                    return True
        return False

    d = res.hidden.shape[-1]
    dlog2 = dlogits.reshape(-1, dlogits.shape[-1])
    grads["head.w"] = res.hidden.reshape(-1, d).T @ dlog2
    grads["head.b"] = dlog2.sum(axis=0)
    dx = (dlog2 @ p["head.w"].T).reshape(res.hidden.shape)
    if config.variant == DECODER:
        dx = _ln_back(dx, cache["final_ln"], p, "final_ln", grads)

    for layer in reversed(range(depth)):
        if not needs_below(layer + 1):
            dx = None
            break
        pre = layer_prefix(layer)
        lc = cache["layers"][layer]
        if config.variant == ENCODER:
            dsum = _ln_back(dx, lc["ln2"], p, pre + "ln2", grads)
            dx = dsum + _ffn_backward(dsum, lc["ffn"], p, pre, grads)
            dsum = _ln_back(dx, lc["ln1"], p, pre + "ln1", grads)
            dx = dsum + _mha_backward(dsum, lc["mha"], p, pre, grads)
        else:
            dh = _ffn_backward(dx, lc["ffn"], p, pre, grads)
            dx = dx + _ln_back(dh, lc["ln2"], p, pre + "ln2", grads)
            dh = _mha_backward(dx, lc["mha"], p, pre, grads)
            dx = dx + _ln_back(dh, lc["ln1"], p, pre + "ln1", grads)

    if dx is not None and needs_below(0):
        if config.variant == ENCODER:
            dx = _ln_back(dx, cache["embed_ln"], p, "embed.ln", grads)
        t = batch.ids.shape[1]
        dtok = np.zeros_like(p["embed.tok"])
        np.add.at(dtok, batch.ids.reshape(-1), dx.reshape(-1, d))
        grads["embed.tok"] = dtok
        dpos = np.zeros_like(p["embed.pos"])
        dpos[:t] = dx.sum(axis=0)
        grads["embed.pos"] = dpos

    out = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None or name in frozen:
            out[name] = np.zeros_like(value)
        else:
            out[name] = g.astype(value.dtype, copy=False)
    return loss, out


def attention_maps(config: ModelConfig, params: dict[str, np.ndarray], batch: Batch) -> np.ndarray:
    """Attention probabilities as (layers, batch, heads, seq, seq)."""
    res = forward(config, params, batch)
    if not res.cache["layers"]:
        b, t = batch.ids.shape
        return np.zeros((0, b, config.n_heads, t, t), dtype=res.logits.dtype)
    return np.stack([lc["mha"]["probs"] for lc in res.cache["layers"]])


def dump_attention(config: ModelConfig, params: dict[str, np.ndarray], batch: Batch,
                   out_path: str | Path, example: int = 0) -> np.ndarray:
    """Write every (layer, head) attention matrix of one example as CSV.

    Header ``layer,head,row,col,value``; values are written with ``repr`` so
    they round-trip exactly. Returns the (layers, heads, seq, seq) array.
    """
    maps = attention_maps(config, params, batch)[:, example]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "row", "col", "value"])
        n_layers, n_heads, t, _ = maps.shape
        for layer in range(n_layers):
            for head in range(n_heads):
                m = maps[layer, head]
                for r in range(t):
                    for c in range(t):
                        w.writerow([layer, head, r, c, repr(float(m[r, c]))])
    return maps


def read_attention_csv(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["layer"]), int(rec["head"]), int(rec["row"]), int(rec["col"]),
                         float(rec["value"])))
    if not rows:
        return np.zeros((0, 0, 0, 0))
    n_l = max(r[0] for r in rows) + 1
    n_h = max(r[1] for r in rows) + 1
    t = max(r[2] for r in rows) + 1
    out = np.zeros((n_l, n_h, t, t))
    for layer, head, r, c, v in rows:
        out[layer, head, r, c] = v
    return out


def count_params(config: ModelConfig, depth: int | None = None, include_embeddings: bool = False) -> int:
    """Parameters touched per token by a (sub-)model; embeddings excluded by default."""
    depth = config.n_layers if depth is None else depth
    total = 0
    for name, shape in param_shapes(config).items():
        if name.startswith("embed.") and not include_embeddings:
            continue
        if name.startswith("layers.") and int(name.split(".")[1]) >= depth:
            continue
        total += int(np.prod(shape))
    return total
