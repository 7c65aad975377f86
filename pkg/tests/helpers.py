"""Hand-built model doubles shared across test modules."""
import numpy as np

from flowmapbg import autodiff as ad
from flowmapbg.model import FlowMapModel, ModelConfig


def tiny_config(dim=2, width=16, depth=1):
    return ModelConfig(dim=dim, hidden_width=width, depth=depth, time_embed_dim=4)


class HandBuiltH(FlowMapModel):
    """FlowMapModel whose backbone h is replaced by a fixed function of x."""

    def __init__(self, dim, h_fn):
        super().__init__(tiny_config(dim=dim), seed=0)
        self._h_fn = h_fn

    def h(self, pmap, x, s, t):
        return self._h_fn(x)


def identity_h_model(dim=2):
    """h(x, s, t) = x regardless of times; u = sign(t - s) * x."""
    return HandBuiltH(dim, lambda x: x)


class HandBuiltU(FlowMapModel):
    """FlowMapModel with the average velocity u given directly (no sign factor)."""

    def __init__(self, dim, u_fn):
        super().__init__(tiny_config(dim=dim), seed=0)
        self._u_fn = u_fn

    def apply(self, pmap, x, s, t):
        return self._u_fn(x)


def identity_u_model(dim=2):
    """u(x, s, t) = x in every direction."""
    return HandBuiltU(dim, lambda x: x)


def constant_u_model(dim=2, c=0.0):
    """u(x, s, t) = c, a constant field (c may be scalar or length-d)."""
    cvec = np.broadcast_to(np.asarray(c, dtype=np.float64), (dim,)).copy()
    return HandBuiltU(dim, lambda x: ad.add(ad.mul(x, 0.0), cvec[None, :]))


class ConsistentDoublingMap:
    """Exact average-velocity field of the linear flow dx/dtau = rate * x.

    u(x, s, t) = x * (exp(rate*(t-s)) - 1)/(t-s), so every step multiplies by
    exp(rate*(t-s)) and backward steps are true inverses at any (s, t).
    With rate = ln 2 the unit interval doubles: the consistent doubling map.
    """

    def __init__(self, dim=2, rate=np.log(2.0)):
        self.dim = dim
        self.rate = float(rate)
        self.cfg = tiny_config(dim=dim)

    def _gain(self, s, t):
        delta = np.asarray(ad.val(t), dtype=np.float64) - np.asarray(ad.val(s), dtype=np.float64)
        flat = np.where(delta == 0.0, 1.0, delta)
        return np.where(delta == 0.0, self.rate, np.expm1(self.rate * delta) / flat)

    def apply(self, pmap, x, s, t):
        return ad.mul(x, self._gain(s, t))

    def forward(self, x, s, t, use_ema=True):
        return self.apply(None, np.asarray(x, dtype=np.float64), s, t)

    def step(self, x, s, t, use_ema=True):
        x = np.asarray(x, dtype=np.float64)
        return x + (t - s) * self.forward(x, s, t)

    def velocity(self, x, tau, use_ema=True):
        return self.forward(x, tau, tau)

    def _pmap(self, use_ema):
        return None


class FoldMap:
    """Deliberately non-invertible one-step map: h(x, s, t) = -2x.

    A single step from 0 to 1 sends x to x + (1)(-2x) = -x, but interior
    steps cross zero: step from 0 to 0.5 gives x(1 - 1) = 0 for every x,
    collapsing the space (singular Jacobian).
    """

    def __init__(self, dim=2):
        self.dim = dim
        self.cfg = tiny_config(dim=dim)

    def apply(self, pmap, x, s, t):
        sp = ad.val(s)
        tp = ad.val(t)
        sgn = 1.0 if float(np.min(tp)) >= float(np.min(sp)) else -1.0
        return ad.mul(x, -2.0 * sgn)

    def forward(self, x, s, t, use_ema=True):
        return self.apply(None, np.asarray(x, dtype=np.float64), s, t)

    def step(self, x, s, t, use_ema=True):
        x = np.asarray(x, dtype=np.float64)
        return x + (t - s) * self.forward(x, s, t)

    def velocity(self, x, tau, use_ema=True):
        return self.forward(x, tau, tau)

    def _pmap(self, use_ema):
        return None
