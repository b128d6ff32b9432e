"""
Core numerical kernels for the MABE Laboratory
Softmax, the dual-probability transform and per-step gradient coefficients
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

from config import DISTRIBUTION_TOL, UPPER_CLIP_WARN_TOL


logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[float], np.ndarray]


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """Normalized distribution over the vocabulary with its natural-log companion"""

    probs: np.ndarray
    log_probs: np.ndarray

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])

    def argmax(self) -> int:
        """Most probable token, ties broken by lowest index"""
        return int(np.argmax(self.probs))

    @classmethod
    def from_probs(cls, probs: ArrayLike) -> "TokenDistribution":
        """Build from probabilities; exact zeros get log-probability -inf"""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or probs.shape[0] < 2:
            raise ValueError(f"Distribution must be a vector of length >= 2, got shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            bad = int(np.flatnonzero((probs < 0) | ~np.isfinite(probs))[0])
            raise ValueError(f"Invalid probability {probs[bad]!r} at index {bad}")
        total = float(probs.sum())
        if abs(total - 1.0) > DISTRIBUTION_TOL:
            raise ValueError(f"Probabilities sum to {total!r}, expected 1")
        with np.errstate(divide="ignore"):
            log_probs = np.log(probs)
        return cls(probs=probs, log_probs=log_probs)

    @classmethod
    def one_hot(cls, size: int, index: int) -> "TokenDistribution":
        probs = np.zeros(size, dtype=np.float64)
        probs[index] = 1.0
        return cls.from_probs(probs)


@dataclass(frozen=True, eq=False)
class DualDistribution(TokenDistribution):
    """Dual probabilities plus the diagnostics of the transform"""

    factors: np.ndarray
    normalizer: float
    raw_positive_mass: float
    upper_clipped: bool


def validate_q(q: ArrayLike) -> np.ndarray:
    """Return q as a float64 vector, rejecting short or non-finite input"""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError(f"QValues must be one-dimensional, got shape {q.shape}")
    if q.shape[0] < 2:
        raise ValueError(f"QValues need at least 2 entries, got {q.shape[0]}")
    finite = np.isfinite(q)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValueError(f"Non-finite Q-value {q[bad]!r} at index {bad}")
    return q


def validate_token(token: int, vocab_size: int) -> int:
    if not 0 <= int(token) < vocab_size:
        raise ValueError(f"Token {token} out of range for vocabulary size {vocab_size}")
    return int(token)


def log_sum_exp(q: ArrayLike) -> float:
    """log sum_a exp(q_a), stable for large Q-values"""
    return float(logsumexp(validate_q(q)))


def softmax(q: ArrayLike) -> TokenDistribution:
    q = validate_q(q)
    log_probs = q - log_sum_exp(q)
    return TokenDistribution(probs=np.exp(log_probs), log_probs=log_probs)


def expected_q(p: Union[TokenDistribution, ArrayLike], q: ArrayLike) -> float:
    """E_p[Q] = sum_a p_a q_a"""
    probs = p.probs if isinstance(p, TokenDistribution) else np.asarray(p, dtype=np.float64)
    q = validate_q(q)
    if probs.shape != q.shape:
        raise ValueError(f"Length mismatch: distribution has {probs.shape[0]} entries, Q has {q.shape[0]}")
    return float(probs @ q)


def dual_factors(q: ArrayLike) -> np.ndarray:
    """Unclipped scaling factors 1 + q_a - E_p[Q] with p = softmax(q)"""
    q = validate_q(q)
    p = softmax(q)
    return 1.0 + q - expected_q(p, q)


def dual_distribution(q: ArrayLike) -> DualDistribution:
    """
    Transform Q-values into dual probabilities

    raw_a = p_a (1 + q_a - E_p[Q]) is clipped to [0, 1] and renormalized.
    The raw values sum to one, so at least one of them is positive.
    """
    q = validate_q(q)
    p = softmax(q)
    factors = 1.0 + q - expected_q(p, q)
    raw = p.probs * factors
    clipped = np.clip(raw, 0.0, 1.0)
    upper_clipped = bool(np.any(raw > 1.0))
    if upper_clipped:
        excess = float(raw.max() - 1.0)
        tokens = np.flatnonzero(raw > 1.0).tolist()
        if excess > UPPER_CLIP_WARN_TOL:
            logger.warning(f"Upper clip of dual probabilities binds at tokens {tokens} (excess {excess:.3g})")
        else:
            logger.debug(f"Rounding-level upper clip at tokens {tokens} (excess {excess:.3g})")

    normalizer = float(clipped.sum())
    probs = clipped / normalizer
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)

    return DualDistribution(
        probs=probs,
        log_probs=log_probs,
        factors=factors,
        normalizer=normalizer,
        raw_positive_mass=float(raw[raw > 0].sum()),
        upper_clipped=upper_clipped,
    )


def mle_coefficients(q: ArrayLike, y: int, label_smoothing: float = 0.0) -> np.ndarray:
    """
    Coefficients of the log-likelihood gradient for one decision step

    g_a = target_a - p_a, where target is one-hot at y, optionally smoothed
    to (1 - s) onehot + s / d.
    """
    q = validate_q(q)
    y = validate_token(y, q.shape[0])
    target = np.zeros_like(q)
    target[y] = 1.0
    if label_smoothing > 0.0:
        target = (1.0 - label_smoothing) * target + label_smoothing / q.shape[0]
    return target - softmax(q).probs


def cov_coefficients(q: ArrayLike) -> np.ndarray:
    """Covariance-perturbation coefficients g_a = p_a (q_a - E_p[Q])"""
    q = validate_q(q)
    p = softmax(q)
    return p.probs * (q - expected_q(p, q))


def mabe_coefficients(q: ArrayLike, y: int, lam: float, label_smoothing: float = 0.0) -> np.ndarray:
    """
    Coefficients of the MABE(lambda) gradient estimator for one decision step

    g = mle - (1 - lambda) cov; lambda = 1 returns the MLE coefficients exactly.
    """
    if not np.isfinite(lam):
        raise ValueError(f"lambda must be finite, got {lam!r}")
    mle = mle_coefficients(q, y, label_smoothing)
    if lam == 1.0:
        return mle
    return mle - (1.0 - lam) * cov_coefficients(q)


def temperature_rescale(q: ArrayLike, beta: float) -> TokenDistribution:
    """softmax(q / beta); beta = 0 is the one-hot argmax"""
    q = validate_q(q)
    if beta < 0:
        raise ValueError(f"Temperature must be non-negative, got {beta}")
    if beta == 0:
        return TokenDistribution.one_hot(q.shape[0], int(np.argmax(q)))
    return softmax(q / beta)


def power_rescale(dist: TokenDistribution, beta: float) -> TokenDistribution:
    """p^(1/beta) renormalized; exact zeros stay zero and beta = 0 is the argmax"""
    if beta < 0:
        raise ValueError(f"Temperature must be non-negative, got {beta}")
    if beta == 0:
        return TokenDistribution.one_hot(dist.size, dist.argmax())
    if beta == 1:
        return dist
    scaled = dist.log_probs / beta
    finite = np.isfinite(scaled)
    shift = scaled[finite].max()
    weights = np.where(finite, np.exp(np.where(finite, scaled - shift, 0.0)), 0.0)
    probs = weights / weights.sum()
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    return TokenDistribution(probs=probs, log_probs=log_probs)
