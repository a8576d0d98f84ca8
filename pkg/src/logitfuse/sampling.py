"""Temperature softmax, nucleus (top-p) truncation, and seeded sampling.

Logits stay float32 upstream; probability math here runs in float64 so that
renormalization noise stays comfortably below 1e-9. The PRNG is numpy's
PCG64 — a named, platform-independent 64-bit generator — and every decode
stream derives its seed as ``base_seed + sample_index`` so independent
completions replay bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, SamplingError

RNG_ALGORITHM = "numpy-pcg64"
RNG_SEED_SCHEME = "stream_seed = base_seed + sample_index"

DEFAULT_TEMPERATURE = 0.6
DEFAULT_TOP_P = 0.95

# Slack for cumulative-mass comparisons; covers float64 summation error so
# p=1.0 keeps the full support and grid-valued distributions cut exactly.
_CUMSUM_EPS = 1e-12


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    seed: int = 0
    greedy: bool = False

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if not (0 <= self.seed < 2**64):
            raise ValueError(f"seed must fit an unsigned 64-bit integer, got {self.seed}")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def stream_seed(base_seed: int, sample_index: int) -> int:
    """Seed for the sample_index-th independent completion of one request."""
    return (base_seed + sample_index) % 2**64


def to_probabilities(logits, temperature: float) -> np.ndarray:
    """Temperature softmax, stabilized by max-subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"logits must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("logits contain NaN or Inf")
    z = (arr - arr.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def top_p_filter(probs, p: float) -> np.ndarray:
    """Keep the smallest set of highest-probability tokens whose mass >= p.

    Ties are broken by ascending token id; the token that crosses the mass
    threshold is included. Survivors are renormalized to sum 1; everything
    else is zeroed.
    """
    if not (0 < p <= 1):
        raise ValueError(f"p must be in (0, 1], got {p}")
    arr = np.asarray(probs, dtype=np.float64)
    if abs(arr.sum() - 1.0) > 1e-6:
        raise ValueError(f"probs must sum to 1, got {arr.sum()}")
    n = arr.size
    # lexsort: primary key is descending probability, secondary ascending id.
    order = np.lexsort((np.arange(n), -arr))
    csum = np.cumsum(arr[order])
    cut = int(np.searchsorted(csum, p - _CUMSUM_EPS, side="left"))
    cut = min(cut, n - 1)
    kept = order[: cut + 1]
    out = np.zeros(n, dtype=np.float64)
    out[kept] = arr[kept]
    return out / out.sum()


def sample(probs, rng: np.random.Generator, greedy: bool = False) -> int:
    """Draw a token id from a probability vector.

    Greedy mode returns the argmax (lowest id on ties) and consumes no
    randomness; otherwise exactly one uniform draw is consumed per call.
    """
    arr = np.asarray(probs, dtype=np.float64)
    csum = np.cumsum(arr)
    total = csum[-1] if arr.size else 0.0
    if total <= 0:
        raise SamplingError("cannot sample from an all-zero distribution")
    if greedy:
        return int(np.argmax(arr))
    u = rng.random() * total
    # First index with cumulative mass strictly above u; zero-probability
    # tokens are flat in csum and can never be selected.
    idx = int(np.searchsorted(csum, u, side="right"))
    return min(idx, arr.size - 1)
