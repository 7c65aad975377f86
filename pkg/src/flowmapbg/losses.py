"""Hybrid training objective for the flow map.

Three components: conditional flow matching (through the average-velocity
path at s = t), an average-velocity regression loss (meanflow via a single
JVP, or the interval-splitting variant), and a cycle-consistency
invertibility penalty applied forward-then-backward. Targets are frozen
(stop-gradient); the invertibility term differentiates through both map
applications.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, NonFiniteError


@dataclass
class LossConfig:
    lambda_avg: float = 1.0  # weight on the average-velocity term (unstated upstream; logged)
    lambda_r: float = 10.0
    p_same: float = 0.25
    variant: str = "meanflow"  # or "splitmeanflow"
    split_lambda: float = 0.5
    time_weight: float = 1.0  # w(s, t), fixed to 1
    # cycle-consistency gradient weighting: "velocity" regresses the backward
    # velocity onto the forward one at every interval width; "interval_sq"
    # is the raw reconstruction error, whose (t-s)^2 damping starves the
    # backward map of gradient near the diagonal
    inv_weighting: str = "velocity"

    def __post_init__(self):
        if self.variant not in ("meanflow", "splitmeanflow"):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.inv_weighting not in ("velocity", "interval_sq"):
            raise ValueError(f"unknown inv_weighting {self.inv_weighting!r}")
        if not (0.0 < self.split_lambda < 1.0):
            raise ValueError("split_lambda must lie in (0, 1)")
        if self.lambda_avg < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 <= self.p_same <= 1.0):
            raise ValueError("p_same must lie in [0, 1]")


class Batch:
    """Paired prior/data samples with time pairs; interpolants recomputed on
    access so they can never go stale."""

    def __init__(self, x0, x1, s, t):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.x1 = np.asarray(x1, dtype=np.float64)
        self.s = np.asarray(s, dtype=np.float64).ravel()
        self.t = np.asarray(t, dtype=np.float64).ravel()
        if self.x0.shape != self.x1.shape:
            raise ValueError("x0 and x1 must have matching shapes")
        k = self.x0.shape[0]
        if self.s.shape != (k,) or self.t.shape != (k,):
            raise ValueError("time vectors must have one entry per row")
        if np.any((self.s < 0) | (self.s > 1) | (self.t < 0) | (self.t > 1)):
            raise ValueError("times must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.x0.shape[0]

    @property
    def x_s(self) -> np.ndarray:
        s = self.s[:, None]
        return s * self.x1 + (1.0 - s) * self.x0

    @property
    def v_s(self) -> np.ndarray:
        return self.x1 - self.x0


def draw_time_pairs(rng: np.random.Generator, k: int, p_same: float):
    """Ordered pairs s <= t from two independent uniforms; with probability
    p_same the pair collapses to s = t (the flow-matching rows)."""
    a = rng.uniform(size=k)
    b = rng.uniform(size=k)
    s = np.minimum(a, b)
    t = np.maximum(a, b)
    same = rng.uniform(size=k) < p_same
    t[same] = s[same]
    return s, t


def make_batch(rng: np.random.Generator, x1: np.ndarray, p_same: float) -> Batch:
    """Standard-Gaussian prior draws paired with the given data rows."""
    x1 = np.asarray(x1, dtype=np.float64)
    k, d = x1.shape
    x0 = rng.standard_normal((k, d))
    s, t = draw_time_pairs(rng, k, p_same)
    return Batch(x0, x1, s, t)


# ---------------------------------------------------------------------------
# Targets (always computed on plain arrays: frozen / stop-gradient)
# ---------------------------------------------------------------------------


def meanflow_target(model, batch: Batch, use_ema: bool = False):
    """u and its frozen average-velocity regression target, both via one
    forward-mode pass seeded along (v_s, 1, 0).

    The identity behind the target: with the sample living at the first
    time argument, d/ds[(t-s) u(x_s, s, t)] = -v(x_s, s) along the
    trajectory, so u = v_s + (t-s) du/ds. (Conventions that carry the
    sample at the second time argument flip the sign; with this argument
    order the minus variant has no stable fixed point and diverges.)
    """
    pmap = model._pmap(use_ema)
    s1 = batch.s[:, None]
    t1 = batch.t[:, None]
    out = model.apply(
        pmap,
        Dual(batch.x_s, batch.v_s),
        Dual(s1, np.ones_like(s1)),
        Dual(t1, np.zeros_like(t1)),
    )
    du_ds = out.tangent
    bad = ~np.all(np.isfinite(du_ds), axis=1)
    if np.any(bad):
        raise NonFiniteError(f"meanflow jvp tangent at batch row {int(np.argmax(bad))}")
    u_tgt = batch.v_s + (t1 - s1) * du_ds
    return out.primal, ad.stop_gradient(u_tgt)


def splitmeanflow_target(model, batch: Batch, split_lambda: float, use_ema: bool = False):
    """Frozen two-half-step target lam*u(x,s,r) + (1-lam)*u(X(x,s,r),r,t)
    with midpoint r = lam*s + (1-lam)*t."""
    lam = float(split_lambda)
    pmap = model._pmap(use_ema)
    s1 = batch.s[:, None]
    t1 = batch.t[:, None]
    r1 = lam * s1 + (1.0 - lam) * t1
    x_s = batch.x_s
    u1 = model.apply(pmap, x_s, s1, r1)
    x_r = x_s + (r1 - s1) * u1
    u2 = model.apply(pmap, x_r, r1, t1)
    return ad.stop_gradient(lam * u1 + (1.0 - lam) * u2)


# ---------------------------------------------------------------------------
# Loss terms (pmap may hold plain arrays or tape leaves)
# ---------------------------------------------------------------------------


def _row_sq(a, b):
    return ad.vsum(ad.square(ad.sub(a, b)), axis=1)


def _invertibility_rows(model, pmap, batch: Batch, u_node=None):
    s1 = batch.s[:, None]
    t1 = batch.t[:, None]
    x_s = batch.x_s
    if u_node is None:
        u_node = model.apply(pmap, x_s, s1, t1)
    xhat_t = ad.add(x_s, ad.mul(t1 - s1, u_node))
    u_back = model.apply(pmap, xhat_t, t1, s1)
    xhat_s = ad.add(xhat_t, ad.mul(s1 - t1, u_back))
    return _row_sq(x_s, xhat_s)


def _cycle_velocity_rows(model, pmap, batch: Batch, u_node=None):
    """Per-row || u(xhat_t, t, s) - u(x_s, s, t) ||^2.

    Multiplying by (t-s)^2 recovers the reconstruction form exactly, since
    x_s - xhat_s = (t-s) (u_fwd - u_back); kept undamped this regresses the
    backward map at every interval width, short steps included.
    """
    s1 = batch.s[:, None]
    t1 = batch.t[:, None]
    x_s = batch.x_s
    if u_node is None:
        u_node = model.apply(pmap, x_s, s1, t1)
    xhat_t = ad.add(x_s, ad.mul(t1 - s1, u_node))
    u_back = model.apply(pmap, xhat_t, t1, s1)
    return _row_sq(u_back, u_node)


def meanflow_loss(model, batch: Batch, use_ema: bool = False) -> float:
    u, u_tgt = meanflow_target(model, batch, use_ema=use_ema)
    return float(np.mean(np.sum((u - u_tgt) ** 2, axis=1)))


def invertibility_loss(model, batch: Batch, use_ema: bool = False) -> float:
    rows = _invertibility_rows(model, model._pmap(use_ema), batch)
    return float(ad.vmean(rows))


def splitmeanflow_loss(model, batch: Batch, split_lambda: float = 0.5, use_ema: bool = False) -> float:
    tgt = splitmeanflow_target(model, batch, split_lambda, use_ema=use_ema)
    u = model.apply(model._pmap(use_ema), batch.x_s, batch.s[:, None], batch.t[:, None])
    return float(np.mean(np.sum((u - tgt) ** 2, axis=1)))


def _loss_terms(model, pmap, batch: Batch, cfg: LossConfig):
    """Shared-path total: rows with s = t feed the CFM term, the rest feed
    the selected average-velocity variant; the cycle term sees all rows."""
    same = batch.t == batch.s
    n_same = int(same.sum())
    n_diff = batch.size - n_same

    if cfg.variant == "meanflow":
        # at s = t the frozen target reduces exactly to v_s (CFM rows)
        _, tgt = meanflow_target(model, batch)
    else:
        tgt = splitmeanflow_target(model, batch, cfg.split_lambda)
        tgt = np.where(same[:, None], batch.v_s, tgt)

    s1 = batch.s[:, None]
    t1 = batch.t[:, None]
    u_node = model.apply(pmap, batch.x_s, s1, t1)
    sq = _row_sq(u_node, tgt)

    zero = np.float64(0.0)
    cfm = ad.mul(ad.vsum(ad.mul(sq, same.astype(np.float64))), 1.0 / n_same) if n_same else zero
    avg = (
        ad.mul(ad.vsum(ad.mul(sq, (~same).astype(np.float64))), 1.0 / n_diff) if n_diff else zero
    )
    vel_rows = _cycle_velocity_rows(model, pmap, batch, u_node=u_node)
    if cfg.inv_weighting == "interval_sq":
        vel_rows = ad.mul(vel_rows, ((t1 - s1) ** 2).ravel())
    inv = ad.vmean(vel_rows)
    total = ad.add(ad.add(cfm, ad.mul(avg, cfg.lambda_avg)), ad.mul(inv, cfg.lambda_r))
    return total, cfm, avg, inv


def total_loss(model, batch: Batch, cfg: LossConfig, use_ema: bool = False):
    """Combined loss and per-term breakdown on plain parameter values."""
    total, cfm, avg, inv = _loss_terms(model, model._pmap(use_ema), batch, cfg)
    breakdown = {
        "loss_total": float(ad.val(total)),
        "loss_cfm": float(ad.val(cfm)),
        "loss_avg": float(ad.val(avg)),
        "loss_inv": float(ad.val(inv)),
    }
    return breakdown["loss_total"], breakdown


def total_loss_node(model, leaves, batch: Batch, cfg: LossConfig):
    """Taped total for gradient computation, plus float breakdown."""
    total, cfm, avg, inv = _loss_terms(model, leaves, batch, cfg)
    breakdown = {
        "loss_total": float(ad.val(total)),
        "loss_cfm": float(ad.val(cfm)),
        "loss_avg": float(ad.val(avg)),
        "loss_inv": float(ad.val(inv)),
    }
    return total, breakdown
