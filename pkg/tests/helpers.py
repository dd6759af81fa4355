"""Shared builders and oracles for the test suite."""

import numpy as np

from growformer.numerics import SeededRng
from growformer.transformer import DECODER, Batch, ModelConfig, backward, cast_params, forward, loss_for, rand_init

# filled by the acceptance tests, printed by conftest at session end
ACCEPTANCE_LINES: list[str] = []


def random_model(config: ModelConfig, seed: int, std: float = 0.1) -> dict:
    """Random weights at a scale where every block matters, plus non-trivial LN params."""
    params = rand_init(config, seed, std=std)
    rng = SeededRng(seed + 10_000)
    for name, value in params.items():
        if name.endswith(".gain"):
            params[name] = (1.0 + rng.normal(value.shape, 0.1)).astype(np.float32)
        elif value.ndim == 1:
            params[name] = rng.normal(value.shape, 0.1).astype(np.float32)
    return params


def random_batch(config: ModelConfig, seed: int, batch: int = 3, seq: int | None = None) -> Batch:
    rng = np.random.default_rng(seed)
    seq = seq or config.max_seq
    ids = rng.integers(4, config.vocab, size=(batch, seq))
    if config.variant == DECODER:
        return Batch.for_lm(ids)
    targets = np.full_like(ids, -1)
    pick = rng.random(ids.shape) < 0.4
    pick[:, 0] = True
    targets[pick] = ids[pick]
    masked = ids.copy()
    masked[pick] = 1
    return Batch(masked, targets, kind="mlm")


def max_gradient_error(config: ModelConfig, seed: int, per_tensor: int = 12, h: float = 1e-6) -> float:
    """Worst relative gap between analytic and central-difference gradients (float64)."""
    params = cast_params(random_model(config, seed, std=0.3), np.float64)
    batch = random_batch(config, seed, batch=2)
    _, grads = backward(config, params, batch)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = loss_for(config, forward(config, params, batch).logits, batch)
            flat[i] = old - h
            down = loss_for(config, forward(config, params, batch).logits, batch)
            flat[i] = old
            fd = (up - down) / (2 * h)
            an = float(grads[name].reshape(-1)[i])
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    return worst
