"""Gradient protection: L-inf clipping, Laplace noise, pseudo interacted items.

Also the two accounting helpers: the per-round LDP budget and the anonymity
degree contributed by pseudo items.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LdpConfig:
    """Clip threshold ``delta`` and Laplace scale ``lam``.

    ``delta=math.inf`` disables clipping and ``lam=0`` disables noise; both
    are meant for oracles and tests.
    """

    delta: float = 0.1
    lam: float = 0.2

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("clip threshold delta must be > 0")
        if not self.lam >= 0:
            raise ValueError("noise strength lambda must be >= 0")


def clip_linf(values, delta: float) -> np.ndarray:
    """Project onto the L-inf ball of radius ``delta`` (componentwise clamp)."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    return np.clip(np.asarray(values, dtype=np.float64), -delta, delta)


def add_laplace(values, lam: float, rng) -> np.ndarray:
    """Add i.i.d. Laplace(0, lam) noise to every component; ``lam=0`` is the identity."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    values = np.asarray(values, dtype=np.float64)
    if lam == 0:
        return values.copy()
    return values + rng.laplace(0.0, lam, size=values.shape)


def protect(values, ldp: LdpConfig, rng) -> np.ndarray:
    """Clip then noise, in that order."""
    return add_laplace(clip_linf(values, ldp.delta), ldp.lam, rng)


def sample_pseudo_items(real_items, n_items: int, m: int, rng) -> np.ndarray:
    """Draw ``m`` distinct items uniformly from those not in ``real_items``."""
    real = np.unique(np.fromiter(real_items, dtype=np.int64))
    available = n_items - len(real)
    if m < 0:
        raise ValueError("m must be >= 0")
    if m > available:
        raise ValueError(
            f"cannot sample {m} pseudo items: only {available} = Q - |real items| are available"
        )
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    pool = np.setdiff1d(np.arange(n_items), real, assume_unique=True)
    return np.sort(rng.choice(pool, size=m, replace=False))


def pseudo_gradients(real_grads, pseudo_ids, rng) -> np.ndarray:
    """Fake item-embedding gradients moment-matched to the real ones.

    Each pseudo row is Gaussian with the per-dimension mean and variance of
    the real gradient rows (diagonal covariance). With a single real row the
    variance is zero and every pseudo row equals it.

    Args:
        real_grads: (K, d) array of real item gradients.
        pseudo_ids: ids to fabricate gradients for; only their count matters.
        rng: numpy Generator.

    Returns:
        (M, d) array, rows aligned with ``pseudo_ids``.
    """
    real_grads = np.atleast_2d(np.asarray(real_grads, dtype=np.float64))
    if real_grads.shape[0] == 0:
        raise ValueError("need at least one real item gradient")
    m = len(pseudo_ids)
    mean = real_grads.mean(axis=0)
    std = real_grads.std(axis=0)
    if m == 0:
        return np.zeros((0, real_grads.shape[1]))
    return mean + std * rng.standard_normal((m, real_grads.shape[1]))


def privacy_budget(delta: float, lam: float) -> float:
    """Per-round LDP budget bound ``2 * delta / lam``."""
    if lam <= 0:
        raise ValueError("unbounded budget: noise strength lambda must be > 0")
    return 2.0 * delta / lam


def anonymity_degree(m: int, n_users: int, observed_ratings: int) -> float:
    """Decoy dilution ``1 + M * P / |Y_o|``."""
    if observed_ratings <= 0:
        raise ValueError("observed_ratings must be > 0")
    return 1.0 + m * n_users / observed_ratings
