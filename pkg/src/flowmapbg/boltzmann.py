"""Self-normalized importance sampling and evaluation metrics.

All weight handling is max-shifted in log space before exponentiation;
estimates and the effective sample size are invariant under constant
log-weight shifts by construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

TWO_PI = 2.0 * np.pi
ASSIGNMENT_CAP = 2048


@dataclass
class Observable:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]  # (K, d) -> (K,) or (K, m)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(x), dtype=np.float64)
        return out[:, None] if out.ndim == 1 else out


def coordinates_observable() -> Observable:
    return Observable("coordinates", lambda x: np.asarray(x, dtype=np.float64))


def energy_observable(target) -> Observable:
    return Observable("energy", target.energy)


def mode_indicator_observable(target) -> Observable:
    """One-hot nearest-mode assignment for mixture targets."""
    n_modes = target.weights.size

    def fn(x):
        idx = target.assign_modes(x)
        out = np.zeros((x.shape[0], n_modes))
        out[np.arange(x.shape[0]), idx] = 1.0
        return out

    return Observable("mode_indicator", fn)


def angles_observable() -> Observable:
    return Observable("angles", lambda x: np.mod(np.asarray(x, dtype=np.float64), TWO_PI))


@dataclass
class SnisEstimate:
    value: np.ndarray
    ess: float
    n_valid: int
    logw_max: float
    logw_spread: float
    standard_error: np.ndarray


def _shifted_weights(logw: np.ndarray) -> np.ndarray:
    logw = np.asarray(logw, dtype=np.float64)
    finite = np.isfinite(logw)
    if np.any(np.isnan(logw)) or np.any(logw == np.inf):
        raise ValueError("log-weights must be finite or -inf")
    if not np.any(finite):
        raise ValueError("no finite log-weights")
    w = np.zeros_like(logw)
    w[finite] = np.exp(logw[finite] - logw[finite].max())
    return w


def ess(logw: np.ndarray) -> float:
    """Kish effective sample size, normalized to (0, 1]."""
    w = _shifted_weights(logw)
    s = w.sum()
    return float(s * s / (w.size * np.sum(w * w)))


def snis(observable: Observable, samples) -> SnisEstimate:
    """Importance-weighted estimate of an observable over the valid rows."""
    valid = np.asarray(samples.valid, dtype=bool)
    if not np.any(valid):
        raise ValueError("no valid samples for SNIS")
    x = samples.x[valid]
    logw = samples.logw[valid]
    w = _shifted_weights(logw)
    o = observable(x)
    wsum = w.sum()
    wbar = w / wsum
    est = wbar @ o
    se = np.sqrt(np.sum(wbar[:, None] ** 2 * (o - est[None, :]) ** 2, axis=0))
    return SnisEstimate(
        value=est,
        ess=float(wsum**2 / (w.size * np.sum(w * w))),
        n_valid=int(valid.sum()),
        logw_max=float(logw.max()),
        logw_spread=float(logw.max() - logw.min()),
        standard_error=se,
    )


def snis_resample(rng: np.random.Generator, samples, k: int | None = None) -> np.ndarray:
    """Multinomial resampling by normalized importance weight."""
    valid = np.asarray(samples.valid, dtype=bool)
    if not np.any(valid):
        raise ValueError("no valid samples to resample")
    x = samples.x[valid]
    w = _shifted_weights(samples.logw[valid])
    p = w / w.sum()
    k = x.shape[0] if k is None else int(k)
    idx = rng.choice(x.shape[0], size=k, replace=True, p=p)
    return x[idx]


# ---------------------------------------------------------------------------
# Wasserstein metrics
# ---------------------------------------------------------------------------


def _quantile_resample(sorted_x: np.ndarray, m: int) -> np.ndarray:
    """Evaluate the empirical quantile function at m midpoint levels."""
    n = sorted_x.size
    src = (np.arange(n) + 0.5) / n
    dst = (np.arange(m) + 0.5) / m
    return np.interp(dst, src, sorted_x)


def w2_energy(a: np.ndarray, b: np.ndarray) -> float:
    """1-D 2-Wasserstein distance via the sorted rank coupling."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    if a.size != b.size:
        m = max(a.size, b.size)
        if a.size < m:
            a = _quantile_resample(a, m)
        else:
            b = _quantile_resample(b, m)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def torus_cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared geodesic cost on the flat torus (wrapped per angle)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("angle dimensionality mismatch")
    delta = a[:, None, :] - b[None, :, :]
    wrapped = np.mod(delta + np.pi, TWO_PI) - np.pi
    return (wrapped**2).sum(axis=2)


def w2_torus(a: np.ndarray, b: np.ndarray, max_points: int = ASSIGNMENT_CAP, seed: int = 0) -> float:
    """Exact-assignment 2-Wasserstein over angle vectors.

    Both sets are uniformly subsampled to a common size (at most
    ``max_points``) so the optimal coupling is a perfect matching, solved
    exactly by the linear-assignment solver.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("angle sets must be 2-D with matching dimensionality")
    n = min(a.shape[0], b.shape[0], max_points)
    rng = np.random.default_rng(seed)
    if a.shape[0] > n:
        a = a[rng.choice(a.shape[0], size=n, replace=False)]
    if b.shape[0] > n:
        b = b[rng.choice(b.shape[0], size=n, replace=False)]
    cost = torus_cost_matrix(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))
