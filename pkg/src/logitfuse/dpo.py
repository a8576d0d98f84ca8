"""Two-dataset DPO objective over tiny, fully enumerable toy policies.

This module exists to verify the math an external preference fine-tune
relies on, not to train anything real: policies are bigram categorical
models small enough for dense finite-difference checks. The mixed loss is

    loss = -[ lam * mean_{type1} log sigmoid(r(chosen) - r(rejected))
              + (1 - lam) * mean_{type2} log sigmoid(r(chosen) - r(rejected)) ]

with the implicit reward r(y) = beta * (log pi(y|x) - log pi_ref(y|x)).
The printed objective is a quantity to maximize; we negate so gradient
descent minimizes. Sequence log-probs are not length-normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError

MAX_TOY_VOCAB = 10

DEFAULT_BETA = 0.1


@dataclass(frozen=True)
class DpoConfig:
    beta: float = DEFAULT_BETA
    lam: float = 0.5  # serialized as "lambda"

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not (0 <= self.lam <= 1):
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class TokenPair:
    """One preference instance in token-id space."""

    x: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.x:
            raise ValueError("prompt x must be non-empty (the policy conditions on its last token)")


class ToyPolicy:
    """Bigram categorical policy with an explicit float64 logit matrix.

    ``logits[prev, next]`` parameterizes the next-token distribution given
    the previous token; the first generated token conditions on the last
    prompt token. log pi(y|x) is the sum of per-step log-softmax terms.
    """

    def __init__(self, logits: np.ndarray) -> None:
        arr = np.asarray(logits, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"logits must be a square matrix, got shape {arr.shape}")
        if arr.shape[0] > MAX_TOY_VOCAB:
            raise ValueError(f"toy vocabulary capped at {MAX_TOY_VOCAB}, got {arr.shape[0]}")
        self.logits = arr.copy()

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[0]

    @classmethod
    def zeros(cls, vocab_size: int) -> "ToyPolicy":
        return cls(np.zeros((vocab_size, vocab_size)))

    @classmethod
    def random(cls, vocab_size: int, seed: int, scale: float = 1.0) -> "ToyPolicy":
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(scale * rng.standard_normal((vocab_size, vocab_size)))

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.logits)

    def _check_ids(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not (0 <= t < self.vocab_size):
                raise ValueError(f"token id {t} out of range for vocab size {self.vocab_size}")

    def _row_log_softmax(self, prev: int) -> np.ndarray:
        row = self.logits[prev]
        z = row - row.max()
        return z - math.log(np.exp(z).sum())

    def log_prob(self, x: Sequence[int], y: Sequence[int]) -> float:
        """log pi(y|x) = sum_t log pi(y_t | x, y_<t)."""
        self._check_ids(x)
        self._check_ids(y)
        prev = x[-1]
        total = 0.0
        for t, tok in enumerate(y):
            lp = self._row_log_softmax(prev)[tok]
            if not math.isfinite(lp):
                raise NumericError(f"zero-probability token at step {t}")
            total += lp
            prev = tok
        return total

    def log_prob_grad(self, x: Sequence[int], y: Sequence[int]) -> tuple[float, np.ndarray]:
        """log pi(y|x) and its gradient with respect to the logit matrix."""
        self._check_ids(x)
        self._check_ids(y)
        grad = np.zeros_like(self.logits)
        prev = x[-1]
        total = 0.0
        for t, tok in enumerate(y):
            logp = self._row_log_softmax(prev)
            if not math.isfinite(logp[tok]):
                raise NumericError(f"zero-probability token at step {t}")
            total += logp[tok]
            grad[prev] -= np.exp(logp)
            grad[prev, tok] += 1.0
            prev = tok
        return total, grad


def implicit_reward(
    policy: ToyPolicy, reference: ToyPolicy, x: Sequence[int], y: Sequence[int], beta: float
) -> float:
    """beta * (log pi(y|x) - log pi_ref(y|x))."""
    return beta * (policy.log_prob(x, y) - reference.log_prob(x, y))


def _log_sigmoid(z: float) -> float:
    # Stable log(sigmoid(z)) for both signs of z.
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


def _pair_margin(policy: ToyPolicy, reference: ToyPolicy, pair: TokenPair, beta: float) -> float:
    return implicit_reward(policy, reference, pair.x, pair.chosen, beta) - implicit_reward(
        policy, reference, pair.x, pair.rejected, beta
    )


def _dataset_loss(
    policy: ToyPolicy, reference: ToyPolicy, pairs: Sequence[TokenPair], beta: float
) -> float:
    if not pairs:
        return 0.0
    total = 0.0
    for pair in pairs:
        total -= _log_sigmoid(_pair_margin(policy, reference, pair, beta))
    return total / len(pairs)


def dpo_loss(
    policy: ToyPolicy,
    reference: ToyPolicy,
    d1: Sequence[TokenPair],
    d2: Sequence[TokenPair],
    config: DpoConfig,
) -> float:
    """Mixed two-dataset loss; per-dataset means, lambda-weighted."""
    if not d1 and not d2:
        raise ValueError("at least one dataset must be non-empty")
    return config.lam * _dataset_loss(policy, reference, d1, config.beta) + (
        1 - config.lam
    ) * _dataset_loss(policy, reference, d2, config.beta)


def dpo_gradient(
    policy: ToyPolicy,
    reference: ToyPolicy,
    d1: Sequence[TokenPair],
    d2: Sequence[TokenPair],
    config: DpoConfig,
) -> np.ndarray:
    """Exact analytic gradient of :func:`dpo_loss` wrt the policy logits."""
    if not d1 and not d2:
        raise ValueError("at least one dataset must be non-empty")
    grad = np.zeros_like(policy.logits)
    for weight, pairs in ((config.lam, d1), (1 - config.lam, d2)):
        if not pairs or weight == 0.0:
            continue
        coeff = weight / len(pairs)
        for pair in pairs:
            lp_c, g_c = policy.log_prob_grad(pair.x, pair.chosen)
            lp_r, g_r = policy.log_prob_grad(pair.x, pair.rejected)
            ref_c = reference.log_prob(pair.x, pair.chosen)
            ref_r = reference.log_prob(pair.x, pair.rejected)
            margin = config.beta * ((lp_c - ref_c) - (lp_r - ref_r))
            # d(-log sigmoid(m))/dm = sigmoid(m) - 1
            dloss_dm = 1.0 / (1.0 + math.exp(-margin)) - 1.0
            grad += coeff * dloss_dm * config.beta * (g_c - g_r)
    return grad


@dataclass(frozen=True)
class StepReport:
    improved: bool
    loss_before: float
    loss_after: float


def gradient_step_improves(
    policy: ToyPolicy,
    reference: ToyPolicy,
    d1: Sequence[TokenPair],
    d2: Sequence[TokenPair],
    config: DpoConfig,
    step_size: float,
) -> StepReport:
    """One descent step on dpo_loss; reports whether the loss went up."""
    before = dpo_loss(policy, reference, d1, d2, config)
    grad = dpo_gradient(policy, reference, d1, d2, config)
    stepped = ToyPolicy(policy.logits - step_size * grad)
    after = dpo_loss(stepped, reference, d1, d2, config)
    return StepReport(improved=after <= before, loss_before=before, loss_after=after)
