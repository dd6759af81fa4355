"""Desk-scale pre-training: corpora, batching, Adam with warmup, two-stage schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import SeededRng
from .transformer import (
    DECODER,
    LAYER_TENSORS,
    MASK_ID,
    N_SPECIAL,
    PAD_ID,
    Batch,
    ModelConfig,
    backward,
    count_params,
    layer_prefix,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- corpus

def make_corpus(kind: str = "synthetic-markov", vocab: int = 64, length: int = 100_000,
                seed: int = 0, path: str | Path | None = None, alpha: float = 0.1) -> np.ndarray:
    """Token stream over ``[N_SPECIAL, vocab)``.

    ``synthetic-markov`` samples an order-2 Markov chain whose per-context
    next-token distributions are Dirichlet(alpha) draws, so the stream has
    structure a model can learn. ``file`` maps each byte ``b`` to id
    ``b + N_SPECIAL`` (vocab is then fixed at 260).
    """
    if kind == "file":
        if path is None:
            raise ValueError("file corpus needs a path")
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise OSError(f"cannot read corpus file {path}: {exc}") from exc
        return bytes_to_ids(data)
    if kind not in ("synthetic-markov", "markov"):
        raise ValueError(f"unknown corpus kind {kind!r}")
    if vocab < N_SPECIAL + 2:
        raise ValueError(f"vocab must leave room for {N_SPECIAL} special ids plus 2 tokens")
    n = vocab - N_SPECIAL
    rng = SeededRng(seed)
    table = rng.dirichlet(np.full(n, alpha), size=n * n)
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    a, b = int(rng.integers(0, n)), int(rng.integers(0, n))
    for i in range(length):
        nxt = int(np.searchsorted(cdf[a * n + b], u[i], side="right"))
        out[i] = nxt
        a, b = b, nxt
    return out + N_SPECIAL


def bytes_to_ids(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64) + N_SPECIAL


def ids_to_bytes(ids: np.ndarray) -> bytes:
    return (np.asarray(ids) - N_SPECIAL).astype(np.uint8).tobytes()


def unigram_entropy(stream: np.ndarray) -> float:
    counts = np.bincount(stream)
    p = counts[counts > 0] / len(stream)
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------------------- batching

def mask_batch(windows: np.ndarray, mask_ratio: float, rng: SeededRng, vocab: int) -> Batch:
    """BERT-style masking: floor(ratio * n) non-PAD positions per row get labels.

    Selected positions become MASK 80% of the time, a random ordinary token
    10%, and stay unchanged 10%.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must be in (0, 1)")
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    if windows.shape[1] < 2:
        raise ValueError("windows must be at least 2 tokens long")
    ids = windows.copy()
    targets = np.full_like(ids, -1)
    low = N_SPECIAL if vocab > N_SPECIAL else 0
    for r in range(ids.shape[0]):
        cand = np.flatnonzero(windows[r] != PAD_ID)
        k = max(1, int(math.floor(len(cand) * mask_ratio))) if len(cand) else 0
        if k == 0:
            continue
        pick = cand[rng.permutation(len(cand))[:k]]
        targets[r, pick] = windows[r, pick]
        u = rng.random(k)
        repl = rng.integers(low, vocab, size=k)
        ids[r, pick[u < 0.8]] = MASK_ID
        rnd = (u >= 0.8) & (u < 0.9)
        ids[r, pick[rnd]] = repl[rnd]
    return Batch(ids, targets, kind="mlm",
                 attention_mask=(windows != PAD_ID) if (windows == PAD_ID).any() else None)


def make_windows(stream: np.ndarray, seq_len: int) -> np.ndarray:
    n = len(stream) // seq_len
    if n == 0:
        raise ValueError(f"corpus of {len(stream)} tokens is shorter than one window of {seq_len}")
    return np.asarray(stream[: n * seq_len], dtype=np.int64).reshape(n, seq_len)


# --------------------------------------------------------------------------- schedule / optimiser

@dataclass
class TrainSchedule:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    epochs: int = 10
    submodel_epochs: int = 0
    layer_step: int = 1
    batch_size: int = 32
    seq_len: int = 32
    total_steps: int | None = None
    mask_ratio: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self, n_layers: int) -> None:
        if self.submodel_epochs > self.epochs:
            raise ValueError("submodel_epochs must not exceed epochs")
        if self.layer_step < 1 or self.layer_step > n_layers:
            raise ValueError(f"layer_step must be in [1, {n_layers}], got {self.layer_step}")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ValueError("batch_size >= 1 and seq_len >= 2 are required")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(schedule: TrainSchedule, step: int, total_steps: int | None = None) -> float:
    """Linear warmup to ``peak_lr``, then linear decay to zero at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    total = total_steps if total_steps is not None else schedule.total_steps
    warm = schedule.warmup_steps
    if warm > 0 and step < warm:
        return schedule.peak_lr * step / warm
    if total is None or total <= warm:
        return schedule.peak_lr
    return schedule.peak_lr * max(0.0, (total - step) / (total - warm))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t={k: 0 for k in params},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, frozen=(), beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam, in place. Frozen tensors keep both values and moments.

    Step counts are tracked per tensor so a tensor that sat out some steps
    gets the bias correction of its own history.
    """
    frozen = set(frozen)
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"{name}: shape mismatch between param, grad and optimiser state")
        dt = p.dtype.type
        state.t[name] += 1
        t = state.t[name]
        m, v = state.m[name], state.v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        denom = np.sqrt(v / dt(1 - beta2 ** t))
        denom += dt(eps)
        step = m / denom
        step *= dt(lr / (1 - beta1 ** t))
        p -= step
    return params, state


# --------------------------------------------------------------------------- logging

@dataclass
class LossRecord:
    step: int
    stage: str
    sub_depth: int
    loss: float
    lr: float
    flops: float


LOSS_HEADER = ["step", "stage", "sub_depth", "loss", "lr", "flops"]


@dataclass
class LossLog:
    records: list[LossRecord] = field(default_factory=list)
    _flushed: int = 0

    def append(self, rec: LossRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("steps must be strictly increasing")
        if not math.isfinite(rec.loss):
            raise ValueError(f"non-finite loss at step {rec.step}")
        self.records.append(rec)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def _row(r: LossRecord) -> list:
        return [r.step, r.stage, r.sub_depth, repr(float(r.loss)), repr(float(r.lr)), repr(float(r.flops))]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_HEADER)
            for r in self.records:
                w.writerow(self._row(r))
        self._flushed = len(self.records)

    def flush(self, path: str | Path) -> None:
        """Append records not yet written (writes the header on first use)."""
        path = Path(path)
        fresh = self._flushed == 0
        with open(path, "w" if fresh else "a", newline="") as fh:
            w = csv.writer(fh)
            if fresh:
                w.writerow(LOSS_HEADER)
            for r in self.records[self._flushed:]:
                w.writerow(self._row(r))
        self._flushed = len(self.records)

    @classmethod
    def read_csv(cls, path: str | Path) -> "LossLog":
        out = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                out.append(LossRecord(int(rec["step"]), rec["stage"], int(rec["sub_depth"]),
                                      float(rec["loss"]), float(rec["lr"]), float(rec["flops"])))
        return out


def steps_to_threshold(log: LossLog, threshold: float, window: int = 1) -> float:
    """Step of the first full trailing window whose mean loss is <= threshold.

    Returns ``math.inf`` when the log never gets there.
    """
    if len(log) == 0:
        raise ValueError("empty loss log")
    window = max(1, int(window))
    losses = log.losses
    if len(losses) < window:
        return math.inf
    csum = np.concatenate([[0.0], np.cumsum(losses)])
    means = (csum[window:] - csum[:-window]) / window
    hits = np.flatnonzero(means <= threshold)
    if len(hits) == 0:
        return math.inf
    return log.records[hits[0] + window - 1].step


def flops_at_step(log: LossLog, step: float) -> float:
    if not math.isfinite(step):
        return math.inf
    for r in log.records:
        if r.step == step:
            return r.flops
    raise KeyError(step)


def final_window_loss(log: LossLog, window: int) -> float:
    return float(log.losses[-window:].mean())


# --------------------------------------------------------------------------- training loop

def submodel_family(n_layers: int, layer_step: int) -> list[int]:
    """Sub-model depths ``l_b, 2 l_b, ...`` closed by the full depth."""
    if layer_step < 1 or layer_step > n_layers:
        raise ValueError(f"layer_step {layer_step} outside [1, {n_layers}]")
    depths = list(range(layer_step, n_layers + 1, layer_step))
    if depths[-1] != n_layers:
        depths.append(n_layers)
    return depths


def submodel_trainable(config: ModelConfig, depth: int, layer_step: int) -> set[str]:
    """Top ``layer_step`` layers of the depth-``depth`` sub-model plus the head."""
    low = max(0, depth - layer_step)
    names = {"head.w", "head.b"}
    for layer in range(low, depth):
        names.update(layer_prefix(layer) + t for t in LAYER_TENSORS)
    return names


class TrainingDiverged(FloatingPointError):
    pass


def _batch_for(config: ModelConfig, windows: np.ndarray, schedule: TrainSchedule, rng: SeededRng) -> Batch:
    if config.variant == DECODER:
        return Batch.for_lm(windows)
    return mask_batch(windows, schedule.mask_ratio, rng, config.vocab)


def steps_per_epoch(n_tokens: int, schedule: TrainSchedule) -> int:
    n_windows = n_tokens // schedule.seq_len
    return max(1, n_windows // schedule.batch_size)


def train_step(config: ModelConfig, params: dict[str, np.ndarray], state: AdamState, batch: Batch,
               depth: int, frozen: set[str], lr: float, schedule: TrainSchedule) -> float:
    """One forward/backward on the bottom ``depth`` layers and one Adam update; returns the loss."""
    loss, grads = backward(config, params, batch, depth=depth, frozen=frozen)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    adam_step(params, grads, state, lr, frozen, schedule.beta1, schedule.beta2, schedule.adam_eps)
    return loss


def two_stage_train(config: ModelConfig, params: dict[str, np.ndarray], schedule: TrainSchedule,
                    corpus: np.ndarray,
                    on_step: Callable[[LossRecord, dict], None] | None = None,
                    ) -> tuple[dict[str, np.ndarray], LossLog]:
    """Train in place; returns ``(params, log)``.

    For the first ``submodel_epochs`` epochs each step samples a sub-model
    depth uniformly from :func:`submodel_family`, runs only those bottom
    layers plus the shared head, and updates only the sub-model's top
    ``layer_step`` layers and the head. Remaining steps train everything.
    ``submodel_epochs = 0`` is ordinary training.
    """
    schedule.validate(config.n_layers)
    if schedule.seq_len > config.max_seq:
        raise ValueError(f"seq_len {schedule.seq_len} exceeds max_seq {config.max_seq}")
    windows = make_windows(corpus, schedule.seq_len)
    per_epoch = steps_per_epoch(len(corpus), schedule)
    total = schedule.total_steps or schedule.epochs * per_epoch
    stage1 = min(total, schedule.submodel_epochs * per_epoch)
    family = submodel_family(config.n_layers, schedule.layer_step)

    data_rng = SeededRng(schedule.seed).spawn(11)
    mask_rng = SeededRng(schedule.seed).spawn(12)
    depth_rng = SeededRng(schedule.seed).spawn(13)
    state = AdamState.zeros_like(params)
    log_ = LossLog()
    all_names = set(params)
    tokens = schedule.batch_size * schedule.seq_len
    head_params = count_params(config, depth=0)
    layer_params = (count_params(config, depth=1) - head_params) if config.n_layers else 0
    flops = 0.0

    order = np.array([], dtype=np.int64)
    cursor = 0
    for step in range(1, total + 1):
        if cursor + schedule.batch_size > len(order):
            order = data_rng.permutation(len(windows))
            cursor = 0
        idx = order[cursor:cursor + schedule.batch_size]
        cursor += schedule.batch_size
        batch = _batch_for(config, windows[idx], schedule, mask_rng)

        if step <= stage1:
            stage = "sub"
            depth = family[depth_rng.sample_index(len(family))]
            frozen = all_names - submodel_trainable(config, depth, schedule.layer_step)
            n_train = min(schedule.layer_step, depth)
            flops += tokens * (2 * (head_params + depth * layer_params)
                               + 4 * (head_params + n_train * layer_params))
        else:
            stage = "full"
            depth = config.n_layers
            frozen = set()
            flops += 6.0 * tokens * (head_params + depth * layer_params)

        lr = lr_at(schedule, step, total)
        try:
            loss = train_step(config, params, state, batch, depth, frozen, lr, schedule)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"{exc} at step {step} (stage={stage}, depth={depth})") from None
        rec = LossRecord(step, stage, depth, loss, lr, flops)
        log_.append(rec)
        if on_step is not None:
            on_step(rec, params)
    return params, log_
