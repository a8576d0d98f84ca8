"""Elementwise logit fusion with an optional warm-up gate.

The fused next-token scores are ``target + alpha * (guider - base)``: the
guider-minus-base delta carries the behavioral shift of the small reasoning
model, and ``alpha`` scales how hard it is applied to the frozen target.
All arithmetic is 32-bit float; vectors are 1-D and must share a length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeMismatchError

DEFAULT_ALPHA = 1.0
DEFAULT_WARMUP_TOKENS = 100


@dataclass(frozen=True)
class GuidanceConfig:
    """Fusion policy: guidance strength and warm-up length.

    ``warmup_tokens`` counts *generated* tokens only (prompt excluded), so
    behavior is prompt-length invariant. Guidance activates at the step that
    produces generated token index ``warmup_tokens`` (0-based).
    """

    alpha: float = DEFAULT_ALPHA
    warmup_tokens: int = DEFAULT_WARMUP_TOKENS

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.warmup_tokens < 0:
            raise ValueError(f"warmup_tokens must be >= 0, got {self.warmup_tokens}")


def as_logit_vector(values) -> np.ndarray:
    """Coerce to a finite 1-D float32 vector."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1:
        raise ShapeMismatchError(f"logit vector must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("logit vector contains NaN or Inf")
    return arr


def fuse(target, guider, base, alpha: float) -> np.ndarray:
    """Combine three logit vectors: ``target + alpha * (guider - base)``."""
    t = as_logit_vector(target)
    g = as_logit_vector(guider)
    b = as_logit_vector(base)
    if not (t.shape == g.shape == b.shape):
        raise ShapeMismatchError(
            f"logit vectors differ in length: {t.shape[0]}, {g.shape[0]}, {b.shape[0]}"
        )
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0.0:
        # Exact identity: skip the float round-trip entirely.
        return t.copy()
    with np.errstate(over="ignore"):
        out = t + np.float32(alpha) * (g - b)
    if not np.all(np.isfinite(out)):
        raise NumericError("fused logits overflowed to non-finite values")
    return out


def fuse_with_warmup(
    target,
    guider,
    base,
    config: GuidanceConfig,
    generated_count: int,
) -> np.ndarray:
    """Gate fusion behind the warm-up window.

    Returns ``target`` verbatim while ``generated_count < config.warmup_tokens``,
    the fused vector otherwise.
    """
    if generated_count < 0:
        raise ValueError(f"generated_count must be >= 0, got {generated_count}")
    if generated_count < config.warmup_tokens:
        return as_logit_vector(target).copy()
    return fuse(target, guider, base, config.alpha)
