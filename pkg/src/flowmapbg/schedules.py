"""Inference time grids: strictly decreasing schedules from 1 to 0.

Five families: linear, geometric (base alpha), squared-cosine, Chebyshev
nodes, and the EDM power-law sigma discretization. Endpoints are enforced
to exactly (1, 0); the samplers reverse the grid internally when they
traverse prior -> data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("linear", "geometric", "cosine", "chebyshev", "edm")


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("grid needs at least two knots")
        if t[0] != 1.0 or t[-1] != 0.0:
            raise ValueError("grid must start at 1 and end at 0")
        if np.any(np.diff(t) >= 0):
            raise ValueError("grid must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def flow_ascending(self) -> np.ndarray:
        """Flow times for prior-to-data traversal, consumed in ladder order.

        The stored ladder runs 1 -> 0 in noise level; flow time is its
        complement, so a ladder concentrated near noise level 0 yields fine
        steps near the data end (flow time 1). For the linear ladder this
        coincides with plain reversal.
        """
        return 1.0 - self.times

    def flow_descending(self) -> np.ndarray:
        """Flow times for data-to-prior traversal (reverse of ascending)."""
        return (1.0 - self.times)[::-1].copy()


def _check_steps(n: int) -> int:
    n = int(n)
    if n < 1:
        raise ValueError("need at least one step")
    return n


def linear_grid(n: int) -> TimeGrid:
    n = _check_steps(n)
    i = np.arange(n + 1, dtype=np.float64)
    return TimeGrid(1.0 - i / n, "linear")


def geometric_grid(n: int, alpha: float = 2.0) -> TimeGrid:
    n = _check_steps(n)
    if alpha <= 1.0:
        raise ValueError("alpha must exceed 1")
    i = np.arange(n + 1, dtype=np.float64)
    t = (alpha ** (n - i) - 1.0) / (alpha**n - 1.0)
    return TimeGrid(t, "geometric", {"alpha": float(alpha)})


def cosine_grid(n: int) -> TimeGrid:
    n = _check_steps(n)
    i = np.arange(n + 1, dtype=np.float64)
    t = np.cos(np.pi * i / (2.0 * n)) ** 2
    t[-1] = 0.0
    return TimeGrid(t, "cosine")


def chebyshev_grid(n: int) -> TimeGrid:
    # first-kind Chebyshev nodes miss both endpoints (t_0 ~ 0.933 at n = 2);
    # both are clamped so the sampler covers the whole interval
    n = _check_steps(n)
    i = np.arange(n + 1, dtype=np.float64)
    t = 0.5 * (np.cos(np.pi * (i + 0.5) / (n + 1)) + 1.0)
    t[0] = 1.0
    t[-1] = 0.0
    return TimeGrid(t, "chebyshev")


def edm_grid(n: int, rho: float = 7.0, sigma_min: float = 1e-3, sigma_max: float = 1.0) -> TimeGrid:
    n = _check_steps(n)
    if not (0.0 < sigma_min < sigma_max):
        raise ValueError("need 0 < sigma_min < sigma_max")
    if rho <= 0:
        raise ValueError("rho must be positive")
    i = np.arange(n + 1, dtype=np.float64)
    inv = 1.0 / rho
    sigma = (sigma_max**inv + (i / n) * (sigma_min**inv - sigma_max**inv)) ** rho
    t = (sigma - sigma_min) / (sigma_max - sigma_min)
    t[0] = 1.0
    t[-1] = 0.0
    return TimeGrid(
        t, "edm", {"rho": float(rho), "sigma_min": float(sigma_min), "sigma_max": float(sigma_max)}
    )


def make_grid(kind: str, n: int, **params) -> TimeGrid:
    if kind == "linear":
        return linear_grid(n)
    if kind == "geometric":
        return geometric_grid(n, **{k: v for k, v in params.items() if k == "alpha"})
    if kind == "cosine":
        return cosine_grid(n)
    if kind == "chebyshev":
        return chebyshev_grid(n)
    if kind == "edm":
        keep = {k: v for k, v in params.items() if k in ("rho", "sigma_min", "sigma_max")}
        return edm_grid(n, **keep)
    raise ValueError(f"unknown schedule kind {kind!r}; choose from {KINDS}")
