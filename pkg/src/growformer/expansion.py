"""Width and depth growth of a trained transformer.

Mapping arrays are 0-based: ``map[i] = j`` means target position ``i`` reuses
source position ``j``. Every mapping has an identity prefix, so each source
index is reused at least once and the rescaling count is never zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng
from .transformer import (
    DECODER,
    ModelConfig,
    ForwardResult,
    Batch,
    LAYER_TENSORS,
    check_params,
    forward,
    layer_prefix,
    loss_for,
    param_shapes,
    rand_init,
)

FPI = "fpi"
AKI = "aki"
DIRECT_COPY = "directcopy"
RAND = "rand"
STRATEGIES = (FPI, AKI, DIRECT_COPY, RAND)


class GeometryError(ValueError):
    """Source and target shapes cannot be related by an expansion."""


@dataclass(frozen=True)
class MappingFn:
    d_src: int
    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.int64)
        object.__setattr__(self, "map", m)
        if m.ndim != 1 or len(m) < self.d_src:
            raise ValueError("mapping must be 1-D and at least as long as d_src")
        if not np.array_equal(m[: self.d_src], np.arange(self.d_src)):
            raise ValueError("mapping must start with the identity prefix")
        if m.min(initial=0) < 0 or m.max(initial=0) >= max(self.d_src, 1):
            raise ValueError("mapping values must lie in [0, d_src)")

    @property
    def d_tgt(self) -> int:
        return len(self.map)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.map, minlength=self.d_src)

    @classmethod
    def identity(cls, n: int) -> "MappingFn":
        return cls(n, np.arange(n))

    def is_identity(self) -> bool:
        return self.d_tgt == self.d_src

    def digest(self) -> str:
        return hashlib.sha256(self.map.astype("<i8").tobytes()).hexdigest()[:16]


def build_mapping(d_src: int, d_tgt: int, rng: SeededRng, balanced: bool = False) -> MappingFn:
    """Identity on ``[0, d_src)``, uniform draws with replacement afterwards.

    ``balanced=True`` draws the tail round-robin through random permutations
    instead, so counts differ by at most one (with ``d_tgt = k * d_src``
    every source index is reused exactly ``k`` times).
    """
    if d_src < 1:
        raise ValueError("d_src must be >= 1")
    if d_src > d_tgt:
        raise GeometryError(f"cannot shrink: d_src={d_src} > d_tgt={d_tgt}")
    tail: list[int] = []
    n_new = d_tgt - d_src
    if balanced:
        while len(tail) < n_new:
            tail.extend(int(i) for i in rng.permutation(d_src))
        tail = tail[:n_new]
    else:
        tail = [rng.sample_index(d_src) for _ in range(n_new)]
    return MappingFn(d_src, np.concatenate([np.arange(d_src), np.asarray(tail, dtype=np.int64)]))


def expand_in(w: np.ndarray, g_in: MappingFn) -> np.ndarray:
    """Row duplication with each copy divided by its multiplicity."""
    if w.shape[0] != g_in.d_src:
        raise ValueError(f"in-mapping over {g_in.d_src} rows, matrix has {w.shape[0]}")
    counts = g_in.counts.astype(w.dtype)
    return w[g_in.map] / counts[g_in.map][:, None]


def expn(w: np.ndarray, g_in: MappingFn, g_out: MappingFn) -> np.ndarray:
    """In-dimension expansion (rows, rescaled by 1/C) then out-dimension (columns)."""
    if w.ndim != 2:
        raise ValueError("expn expects a matrix")
    if w.shape[1] != g_out.d_src:
        raise ValueError(f"out-mapping over {g_out.d_src} columns, matrix has {w.shape[1]}")
    return expand_in(w, g_in)[:, g_out.map]


def expand_bias(b: np.ndarray, g_out: MappingFn) -> np.ndarray:
    """Vectors are only duplicated along the output axis; no rescaling."""
    if b.ndim != 1 or b.shape[0] != g_out.d_src:
        raise ValueError(f"vector of length {b.shape} does not match mapping over {g_out.d_src}")
    return b[g_out.map]


@dataclass(frozen=True)
class SourceTargetPair:
    source_config: ModelConfig
    source_params: dict
    target_config: ModelConfig

    def __post_init__(self):
        s, t = self.source_config, self.target_config
        check_params(s, self.source_params)
        if s.variant != t.variant:
            raise GeometryError("source and target variants differ")
        if s.vocab != t.vocab or s.max_seq != t.max_seq:
            raise GeometryError("source and target must share vocab and max_seq")
        if s.n_layers > t.n_layers or s.hidden > t.hidden or s.d_ff > t.d_ff:
            raise GeometryError(
                f"target must be at least as large: layers {s.n_layers}->{t.n_layers}, "
                f"hidden {s.hidden}->{t.hidden}, d_ff {s.d_ff}->{t.d_ff}"
            )
        if s.n_heads > t.n_heads:
            raise GeometryError("target has fewer heads than source")

    @property
    def widened_config(self) -> ModelConfig:
        """Target width at source depth."""
        return self.target_config.with_(n_layers=self.source_config.n_layers)


def _head_blocks(heads: MappingFn, d_k: int) -> MappingFn:
    """Coordinate-level mapping that moves whole d_k blocks along with heads."""
    coords = (heads.map[:, None] * d_k + np.arange(d_k)[None, :]).reshape(-1)
    return MappingFn(heads.d_src * d_k, coords)


@dataclass(frozen=True)
class ExpansionPlan:
    """Coordinated mappings for one whole-model width expansion.

    ``hidden`` is the single residual-stream mapping (embedding columns,
    Q/K/V inputs, W^O outputs, FFN input/output, every LayerNorm); it is
    built block-wise from ``heads``. Inside each layer the attention heads
    and the FFN units get their own mappings (``layer_heads[l]`` and
    ``layer_ffn[l]``), since nothing outside the layer sees those axes.
    """

    strategy: str
    seed: int
    heads: MappingFn
    hidden: MappingFn
    layer_heads: tuple[MappingFn, ...]
    layer_ffn: tuple[MappingFn, ...]
    head_dim: int
    vocab: int = 0
    balanced: bool = False
    extra: dict = field(default_factory=dict)

    def attention(self, layer: int) -> MappingFn:
        """Coordinate mapping of the concatenated head outputs of ``layer``."""
        return _head_blocks(self.layer_heads[layer], self.head_dim)

    def tensor_mappings(self, config: ModelConfig) -> dict[str, tuple[MappingFn | None, MappingFn]]:
        """(g_in, g_out) per tensor name; ``g_in`` is None for vectors."""
        vocab_id = MappingFn.identity(config.vocab)
        seq_id = MappingFn.identity(config.max_seq)
        h = self.hidden
        attn = [self.attention(layer) for layer in range(config.n_layers)]
        out: dict[str, tuple[MappingFn | None, MappingFn]] = {}
        for name in param_shapes(config):
            if name.startswith("layers."):
                _, idx, short = name.split(".", 2)
                a, f = attn[int(idx)], self.layer_ffn[int(idx)]
            else:
                short = name
            if name == "embed.tok":
                out[name] = (vocab_id, h)
            elif name == "embed.pos":
                out[name] = (seq_id, h)
            elif name == "head.w":
                out[name] = (h, vocab_id)
            elif name == "head.b":
                out[name] = (None, vocab_id)
            elif short in ("attn.wq", "attn.wk", "attn.wv"):
                out[name] = (h, a)
            elif short in ("attn.bq", "attn.bk", "attn.bv"):
                out[name] = (None, a)
            elif short == "attn.wo":
                out[name] = (a, h)
            elif short == "ffn.w1":
                out[name] = (h, f)
            elif short == "ffn.b1":
                out[name] = (None, f)
            elif short == "ffn.w2":
                out[name] = (f, h)
            else:
                out[name] = (None, h)
        return out


def check_plan_constraints(plan: ExpansionPlan, config: ModelConfig) -> list[str]:
    """Walk every producer -> consumer edge; return violations (empty when sound)."""
    m = plan.tensor_mappings(config)
    problems = []

    def same(a: MappingFn, b: MappingFn, what: str):
        if not np.array_equal(a.map, b.map):
            problems.append(what)

    same(m["embed.tok"][1], m["embed.pos"][1], "token/position embedding widths")
    residual = m["embed.tok"][1]
    for layer in range(config.n_layers):
        pre = layer_prefix(layer)
        for x in ("q", "k", "v"):
            same(residual, m[pre + f"attn.w{x}"][0], f"{pre}embedding out == w{x} in")
            same(m[pre + f"attn.w{x}"][1], m[pre + "attn.wo"][0], f"{pre}w{x} out == wo in")
            same(m[pre + f"attn.w{x}"][1], m[pre + f"attn.b{x}"][1], f"{pre}b{x} follows w{x}")
        same(m[pre + "ffn.w1"][1], m[pre + "ffn.b1"][1], f"{pre}b1 follows w1")
        same(m[pre + "attn.wo"][1], m[pre + "attn.bo"][1], f"{pre}bo follows wo")
        same(m[pre + "attn.wq"][0], m[pre + "attn.wo"][1], f"{pre}qkv in == wo out (residual)")
        same(m[pre + "attn.wo"][1], m[pre + "ffn.w1"][0], f"{pre}wo out == w1 in")
        same(m[pre + "ffn.w1"][1], m[pre + "ffn.w2"][0], f"{pre}w1 out == w2 in")
        same(m[pre + "ffn.w1"][0], m[pre + "ffn.w2"][1], f"{pre}w1 in == w2 out (residual)")
        for ln in ("ln1", "ln2"):
            same(m[pre + f"{ln}.gain"][1], residual, f"{pre}{ln} follows hidden mapping")
        residual = m[pre + "ffn.w2"][1]
    same(residual, m["head.w"][0], "final hidden == head in")
    if "embed.ln.gain" in m:
        same(m["embed.ln.gain"][1], m["embed.tok"][1], "embedding LayerNorm")
    if "final_ln.gain" in m:
        same(m["final_ln.gain"][1], residual, "final LayerNorm")
    return problems


def build_plan(pair: SourceTargetPair, strategy: str = FPI, seed: int = 0,
               balanced: bool = False) -> ExpansionPlan:
    """Sample the head and FFN mappings and derive the hidden mapping from heads."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    s, t = pair.source_config, pair.target_config
    if s.head_dim != t.head_dim:
        raise GeometryError(
            f"head dimension must stay fixed: source {s.hidden}/{s.n_heads}={s.head_dim}, "
            f"target {t.hidden}/{t.n_heads}={t.head_dim}"
        )
    rng = SeededRng(seed)
    heads = build_mapping(s.n_heads, t.n_heads, rng.spawn(1), balanced)
    hidden = _head_blocks(heads, s.head_dim)
    layer_heads = tuple(build_mapping(s.n_heads, t.n_heads, rng.spawn(100 + layer), balanced)
                        for layer in range(s.n_layers))
    layer_ffn = tuple(build_mapping(s.d_ff, t.d_ff, rng.spawn(200 + layer), balanced)
                      for layer in range(s.n_layers))
    return ExpansionPlan(strategy=strategy, seed=seed, heads=heads, hidden=hidden, layer_heads=layer_heads,
                         layer_ffn=layer_ffn, head_dim=s.head_dim, vocab=s.vocab, balanced=balanced)


def _expand_tensor(value: np.ndarray, g_in: MappingFn | None, g_out: MappingFn) -> np.ndarray:
    if g_in is None:
        return expand_bias(value, g_out)
    return expn(value, g_in, g_out)


def fpi_expand(pair: SourceTargetPair, plan: ExpansionPlan) -> dict[str, np.ndarray]:
    """Function-preserving widening; returns params at source depth, target width."""
    _check_plan(pair, plan)
    src = pair.source_params
    maps = plan.tensor_mappings(pair.source_config)
    return {name: _expand_tensor(src[name], *maps[name]) for name in maps}


def aki_expand(pair: SourceTargetPair, plan: ExpansionPlan) -> dict[str, np.ndarray]:
    """Widening whose appended out-columns come from the next layer up.

    For each layer matrix, columns ``[0, d_out_src)`` are the in-expanded
    matrix of the same layer; the remaining columns are taken from the
    in-expanded matrix of layer ``l + 1`` through the out-mapping. The top
    layer has no upper neighbour and uses itself (plain FPI). Embeddings,
    biases, LayerNorm and the head follow the FPI rule.
    """
    _check_plan(pair, plan)
    s = pair.source_config
    if s.n_layers < 2:
        raise GeometryError("AKI needs at least two source layers (no upper layer to borrow from)")
    out = fpi_expand(pair, plan)
    src = pair.source_params
    maps = plan.tensor_mappings(s)
    for layer in range(s.n_layers):
        upper = min(layer + 1, s.n_layers - 1)
        for short in LAYER_TENSORS:
            name = layer_prefix(layer) + short
            up_name = layer_prefix(upper) + short
            g_in, g_out = maps[name]
            if g_in is None:
                continue
            up_in, up_out = maps[up_name]
            cur = expand_in(src[name], g_in)
            up = expand_in(src[up_name], up_in)
            out[name] = aki_merge(cur, up, up_out)
    return out


def aki_merge(cur_in: np.ndarray, upper_in: np.ndarray, g_out: MappingFn) -> np.ndarray:
    """Stack in-expanded current-layer columns with upper-layer columns picked by its out-mapping."""
    d = g_out.d_src
    return np.concatenate([cur_in, upper_in[:, g_out.map[d:]]], axis=1)


def _check_plan(pair: SourceTargetPair, plan: ExpansionPlan) -> None:
    s, t = pair.source_config, pair.target_config
    if plan.hidden.d_src != s.hidden or plan.hidden.d_tgt != t.hidden:
        raise GeometryError("plan hidden mapping does not match the pair")
    if len(plan.layer_heads) != s.n_layers or len(plan.layer_ffn) != s.n_layers:
        raise GeometryError("plan has per-layer mappings for a different depth")
    for f in plan.layer_ffn:
        if f.d_src != s.d_ff or f.d_tgt != t.d_ff:
            raise GeometryError("plan FFN mapping does not match the pair")
    for a in plan.layer_heads:
        if a.d_src != s.n_heads or a.d_tgt != t.n_heads:
            raise GeometryError("plan head mapping does not match the pair")


def depth_stack(config: ModelConfig, params: dict[str, np.ndarray], n_layers: int) -> dict[str, np.ndarray]:
    """Stack ``k = n_layers // L`` full copies bottom-up, then the top remainder layers.

    Returns a new parameter dict with ``n_layers`` layers; embeddings and the
    head are taken once from the input model.
    """
    src_layers = config.n_layers
    if src_layers < 1 or n_layers < src_layers:
        raise GeometryError(f"cannot stack {src_layers} layers into {n_layers}")
    order = stack_order(src_layers, n_layers)
    out = {}
    for name, value in params.items():
        if not name.startswith("layers."):
            out[name] = value.copy()
    for new_idx, old_idx in enumerate(order):
        for short in LAYER_TENSORS:
            out[layer_prefix(new_idx) + short] = params[layer_prefix(old_idx) + short].copy()
    cfg = config.with_(n_layers=n_layers)
    return {name: out[name] for name in param_shapes(cfg)}


def stack_order(src_layers: int, n_layers: int) -> list[int]:
    """0-based source layer index for every stacked layer."""
    k = n_layers // src_layers
    rem = n_layers - src_layers * k
    return list(range(src_layers)) * k + list(range(src_layers - rem, src_layers))


def direct_copy(pair: SourceTargetPair, seed: int, std: float = 0.02) -> dict[str, np.ndarray]:
    """Copy source tensors into the leading block of a freshly initialised target."""
    out = rand_init(pair.target_config, seed, std=std)
    for name, value in pair.source_params.items():
        block = tuple(slice(0, n) for n in value.shape)
        out[name][block] = value
    return out


def expand(pair: SourceTargetPair, strategy: str, seed: int = 0, balanced: bool = False,
           ) -> tuple[dict[str, np.ndarray], ExpansionPlan | None]:
    """Full growth to the target: width by ``strategy``, then depth stacking."""
    t = pair.target_config
    if strategy == RAND:
        return rand_init(t, seed), None
    if strategy == DIRECT_COPY:
        return direct_copy(pair, seed), None
    plan = build_plan(pair, strategy, seed, balanced)
    widened = fpi_expand(pair, plan) if strategy == FPI else aki_expand(pair, plan)
    return depth_stack(pair.widened_config, widened, t.n_layers), plan


@dataclass
class PreservationReport:
    max_logit_gap: float
    source_loss: float
    target_loss: float
    tol: float
    n_inputs: int

    @property
    def loss_gap(self) -> float:
        return abs(self.target_loss - self.source_loss)

    @property
    def relative_loss_gap(self) -> float:
        return self.loss_gap / max(abs(self.source_loss), 1e-12)

    @property
    def passed(self) -> bool:
        return self.max_logit_gap <= self.tol


def random_eval_batches(config: ModelConfig, n_inputs: int, seq_len: int, seed: int,
                        batch_size: int = 25, stream: np.ndarray | None = None,
                        mask_ratio: float = 0.15) -> list[Batch]:
    """Deterministic evaluation batches: random ids, or windows of ``stream``."""
    from .training import mask_batch

    rng = SeededRng(seed)
    batches = []
    remaining = n_inputs
    while remaining > 0:
        b = min(batch_size, remaining)
        if stream is None:
            ids = rng.integers(4, config.vocab, size=(b, seq_len)) if config.vocab > 4 \
                else rng.integers(0, config.vocab, size=(b, seq_len))
        else:
            starts = rng.integers(0, len(stream) - seq_len, size=b)
            ids = np.stack([stream[s:s + seq_len] for s in starts])
        if config.variant == DECODER:
            batches.append(Batch.for_lm(ids))
        else:
            batches.append(mask_batch(ids, mask_ratio, rng, config.vocab))
        remaining -= b
    return batches


def eval_loss(config: ModelConfig, params: dict, batches: list[Batch]) -> float:
    total, n = 0.0, 0
    for b in batches:
        k = int((b.targets >= 0).sum())
        total += loss_for(config, forward(config, params, b).logits, b) * k
        n += k
    return total / n


def verify_preservation(source_config: ModelConfig, source_params: dict,
                        target_config: ModelConfig, target_params: dict,
                        n_inputs: int = 100, tol: float = 1e-4, seed: int = 0,
                        seq_len: int | None = None, stream: np.ndarray | None = None,
                        ) -> PreservationReport:
    """Feed identical batches to both models and compare logits and losses."""
    if source_config.vocab != target_config.vocab:
        raise GeometryError(f"vocab mismatch: {source_config.vocab} vs {target_config.vocab}")
    if source_config.variant != target_config.variant:
        raise GeometryError("variant mismatch")
    seq_len = seq_len or min(source_config.max_seq, target_config.max_seq)
    batches = random_eval_batches(source_config, n_inputs, seq_len, seed, stream=stream)
    gap = 0.0
    tot_s = tot_t = 0.0
    n = 0
    for b in batches:
        rs: ForwardResult = forward(source_config, source_params, b)
        rt: ForwardResult = forward(target_config, target_params, b)
        gap = max(gap, float(np.max(np.abs(rs.logits.astype(np.float64) - rt.logits))))
        k = int((b.targets >= 0).sum())
        tot_s += loss_for(source_config, rs.logits, b) * k
        tot_t += loss_for(target_config, rt.logits, b) * k
        n += k
    return PreservationReport(max_logit_gap=gap, source_loss=tot_s / n, target_loss=tot_t / n,
                              tol=tol, n_inputs=n_inputs)


def expansion_report(pair: SourceTargetPair, target_params: dict, plan: ExpansionPlan | None,
                     strategy: str, verification: PreservationReport | None = None) -> str:
    """Human-readable summary: per-tensor shape change, mapping digests, gaps."""
    s, t = pair.source_config, pair.target_config
    lines = [
        f"strategy: {strategy}",
        f"source: layers={s.n_layers} hidden={s.hidden} heads={s.n_heads} d_ff={s.d_ff}",
        f"target: layers={t.n_layers} hidden={t.hidden} heads={t.n_heads} d_ff={t.d_ff}",
    ]
    if plan is not None:
        lines += [
            f"seed: {plan.seed}",
            f"mapping.heads: {plan.heads.digest()} {plan.heads.map.tolist()}",
            f"mapping.hidden: {plan.hidden.digest()}",
        ]
        for layer, (a, f) in enumerate(zip(plan.layer_heads, plan.layer_ffn)):
            lines.append(f"mapping.layer{layer}: heads {a.digest()} {a.map.tolist()} ffn {f.digest()}")
        if t.n_layers > s.n_layers:
            lines.append(f"stack order: {stack_order(s.n_layers, t.n_layers)}")
    lines.append("tensors:")
    for name in param_shapes(t):
        src_shape = pair.source_params[name].shape if name in pair.source_params else None
        src_txt = "x".join(map(str, src_shape)) if src_shape is not None else "-"
        lines.append(f"  {name}: {src_txt} -> {'x'.join(map(str, target_params[name].shape))}")
    if verification is not None:
        lines += [
            f"verify.max_logit_gap: {verification.max_logit_gap!r}",
            f"verify.source_loss: {verification.source_loss!r}",
            f"verify.target_loss: {verification.target_loss!r}",
            f"verify.loss_gap: {verification.loss_gap!r}",
        ]
    return "\n".join(lines) + "\n"


__all__ = [
    "AKI", "DIRECT_COPY", "FPI", "RAND", "STRATEGIES",
    "ExpansionPlan", "GeometryError", "MappingFn", "PreservationReport", "SourceTargetPair",
    "aki_expand", "aki_merge", "build_mapping", "build_plan", "check_plan_constraints",
    "depth_stack", "direct_copy", "eval_loss", "expand", "expand_bias", "expand_in",
    "expansion_report", "expn", "fpi_expand", "random_eval_batches", "stack_order",
    "verify_preservation",
]

