"""Two-time flow-map network u(x, s, t) = sign(t - s) * h(x, s, t).

The backbone is a residual MLP over [x, embed(s), embed(t)] with a
zero-initialized output head, so a fresh model is the identity map.
EMA weights are tracked alongside the raw parameters and used for
evaluation by default.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, Node, ParamStore

MAGIC = b"FMBG"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    dim: int
    hidden_width: int = 128
    depth: int = 4
    time_embed_dim: int = 16  # frequencies per time input; each gives sin+cos
    activation: str = "silu"
    freq_min: float = 1.0
    freq_max: float = 64.0
    conditioning: str = "film"  # per-block time injection; "concat" for input-only


def _layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    in_dim = cfg.dim + 4 * cfg.time_embed_dim
    layout = [("w_in", (in_dim, cfg.hidden_width)), ("b_in", (cfg.hidden_width,))]
    for k in range(cfg.depth):
        layout.append((f"blk{k}_w1", (cfg.hidden_width, cfg.hidden_width)))
        layout.append((f"blk{k}_b1", (cfg.hidden_width,)))
        if cfg.conditioning == "film":
            layout.append((f"blk{k}_tw", (4 * cfg.time_embed_dim, cfg.hidden_width)))
        layout.append((f"blk{k}_w2", (cfg.hidden_width, cfg.hidden_width)))
        layout.append((f"blk{k}_b2", (cfg.hidden_width,)))
    layout.append(("w_out", (cfg.hidden_width, cfg.dim)))
    layout.append(("b_out", (cfg.dim,)))
    return layout


class TimeEmbedding:
    """sin/cos Fourier features with geometric frequencies.

    s and t are embedded independently so the network can distinguish
    (s, t) from (t, s).
    """

    def __init__(self, n_frequencies: int, freq_min: float = 1.0, freq_max: float = 1e3):
        if n_frequencies < 1:
            raise ValueError("need at least one frequency")
        if n_frequencies == 1:
            self.frequencies = np.array([freq_min])
        else:
            self.frequencies = np.geomspace(freq_min, freq_max, n_frequencies)

    def __call__(self, t):
        # t has shape (K, 1); output (K, 2 * n_frequencies)
        phases = ad.mul(t, self.frequencies[None, :])
        return ad.concat([ad.sin(phases), ad.cos(phases)], axis=1)


def _as_column(v, k: int):
    """Normalize a time argument to a (K, 1) column of matching kind."""
    if isinstance(v, Dual):
        return Dual(_col_arr(v.primal, k), _col_arr(v.tangent, k))
    if isinstance(v, Node):
        raise ValueError("pass time Nodes pre-shaped to (K, 1)")
    return _col_arr(np.asarray(v, dtype=np.float64), k)


def _col_arr(a: np.ndarray, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return np.full((k, 1), float(a))
    if a.ndim == 1:
        return a.reshape(-1, 1)
    return a


class FlowMapModel:
    """Flow-map network with raw and EMA parameter stores."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.dim = cfg.dim
        self.params = ParamStore(_layout(cfg))
        self.ema_params = ParamStore(_layout(cfg))
        self.embed = TimeEmbedding(cfg.time_embed_dim, cfg.freq_min, cfg.freq_max)
        if cfg.activation == "silu":
            self._act = ad.silu
        elif cfg.activation == "tanh":
            self._act = ad.tanh
        else:
            raise ValueError(f"unknown activation {cfg.activation!r}")
        self._init_params(np.random.default_rng(seed))
        self.ema_params.values[:] = self.params.values

    def _init_params(self, rng) -> None:
        for name, shape in self.params.layout:
            if name in ("w_out", "b_out"):
                continue  # zero init keeps the initial map at identity
            if len(shape) < 2:
                continue  # biases start at zero
            fan_in = shape[0]
            self.params.set(name, rng.normal(size=shape) * np.sqrt(1.0 / fan_in))

    # -- evaluation ---------------------------------------------------------

    def h(self, pmap, x, s, t):
        """Backbone h(x, s, t) before the sign factor."""
        k = ad.val(x).shape[0]
        s = _as_column(s, k)
        t = _as_column(t, k)
        emb = ad.concat([self.embed(s), self.embed(t)], axis=1)
        feats = ad.concat([x, emb], axis=1)
        film = self.cfg.conditioning == "film"
        hdd = self._act(ad.affine(feats, pmap["w_in"], pmap["b_in"]))
        for blk in range(self.cfg.depth):
            pre = ad.affine(hdd, pmap[f"blk{blk}_w1"], pmap[f"blk{blk}_b1"])
            if film:
                pre = ad.add(pre, ad.affine(emb, pmap[f"blk{blk}_tw"], 0.0))
            inner = self._act(pre)
            hdd = ad.add(hdd, ad.affine(inner, pmap[f"blk{blk}_w2"], pmap[f"blk{blk}_b2"]))
        return ad.affine(hdd, pmap["w_out"], pmap["b_out"])

    def apply(self, pmap, x, s, t):
        """u(x, s, t) = sign(t - s) * h(x, s, t), with sign(0) = +1.

        The sign factor is piecewise constant in (s, t), so it multiplies as
        a constant in both differentiation modes.
        """
        k = ad.val(x).shape[0]
        sp = _col_arr(ad.val(_as_column(s, k)), k)
        tp = _col_arr(ad.val(_as_column(t, k)), k)
        sgn = np.where(tp >= sp, 1.0, -1.0)
        return ad.mul(sgn, self.h(pmap, x, s, t))

    def _pmap(self, use_ema: bool):
        store = self.ema_params if use_ema else self.params
        return store.as_dict()

    def forward(self, x, s, t, use_ema: bool = True) -> np.ndarray:
        """Plain evaluation of the average velocity for a batch."""
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input state")
        return self.apply(self._pmap(use_ema), x, s, t)

    def step(self, x, s, t, use_ema: bool = True) -> np.ndarray:
        """Discrete flow-map step x + (t - s) * u(x, s, t)."""
        x = np.asarray(x, dtype=np.float64)
        k = x.shape[0]
        sp = _col_arr(np.asarray(s, dtype=np.float64), k)
        tp = _col_arr(np.asarray(t, dtype=np.float64), k)
        return x + (tp - sp) * self.forward(x, s, t, use_ema=use_ema)

    def velocity(self, x, tau, use_ema: bool = True) -> np.ndarray:
        """Instantaneous velocity v(x, tau) = u(x, tau, tau)."""
        return self.forward(x, tau, tau, use_ema=use_ema)

    # -- training support ----------------------------------------------------

    def ema_update(self, decay: float = 0.999) -> None:
        if not (0.0 <= decay < 1.0):
            raise ValueError("decay must be in [0, 1)")
        self.ema_params.values *= decay
        self.ema_params.values += (1.0 - decay) * self.params.values

    # -- checkpoint io --------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "format_version": FORMAT_VERSION,
            "dim": self.cfg.dim,
            "hidden_width": self.cfg.hidden_width,
            "depth": self.cfg.depth,
            "time_embed_dim": self.cfg.time_embed_dim,
            "activation": self.cfg.activation,
            "freq_min": self.cfg.freq_min,
            "freq_max": self.cfg.freq_max,
            "conditioning": self.cfg.conditioning,
            "layout": [[n, list(s)] for n, s in self.params.layout],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(self.params.values.astype("<f8").tobytes())
            fh.write(self.ema_params.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FlowMapModel":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header["format_version"] != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header['format_version']}")
            cfg = ModelConfig(
                dim=header["dim"],
                hidden_width=header["hidden_width"],
                depth=header["depth"],
                time_embed_dim=header["time_embed_dim"],
                activation=header["activation"],
                freq_min=header["freq_min"],
                freq_max=header["freq_max"],
                conditioning=header.get("conditioning", "concat"),
            )
            model = cls(cfg)
            expect_layout = [(n, tuple(s)) for n, s in header["layout"]]
            if expect_layout != model.params.layout:
                raise ValueError("checkpoint layout table does not match architecture")
            n = model.params.size
            raw = np.frombuffer(fh.read(8 * n), dtype="<f8")
            ema = np.frombuffer(fh.read(8 * n), dtype="<f8")
            if raw.size != n or ema.size != n:
                raise ValueError(
                    f"checkpoint truncated: expected {n} parameters per blob"
                )
            model.params.values = raw.astype(np.float64).copy()
            model.ema_params.values = ema.astype(np.float64).copy()
            return model
