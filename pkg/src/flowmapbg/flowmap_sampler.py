"""Few-step generation with exact per-step change-of-variables likelihoods.

Each step evaluates the full d x d Jacobian of the discrete flow map via d
forward-mode unit probes and takes log|det| through an LU factorization with
partial pivoting. NFE is accounted at d + 1 network evaluations per sample
per step (d Jacobian columns plus one value pass).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Dual
from .schedules import TimeGrid
from .streams import stream

LOG_DET_FLOOR = np.log(1e-300)


def prior_logp(x: np.ndarray) -> np.ndarray:
    """Standard-Gaussian log-density per row."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    return -0.5 * d * np.log(2.0 * np.pi) - 0.5 * (x**2).sum(axis=1)


@dataclass
class StepResult:
    x_next: np.ndarray
    logdet: np.ndarray
    valid: np.ndarray
    nfe_per_sample: int
    jac: np.ndarray | None = None


@dataclass
class WeightedSampleSet:
    x: np.ndarray
    logp_model: np.ndarray
    energy: np.ndarray
    logw: np.ndarray
    valid: np.ndarray
    nfe_total: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.x.shape[0]
        for name in ("logp_model", "energy", "logw", "valid"):
            if getattr(self, name).shape != (k,):
                raise ValueError(f"{name} must have one entry per sample")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def nfe_per_sample(self) -> float:
        return self.nfe_total / self.x.shape[0]


def step_jacobian(model, x, s: float, t: float, use_ema: bool = True):
    """Value and exact Jacobian of the step map X(x) = x + (t-s) u(x, s, t).

    Batched over rows: d forward-mode probes give the columns of du/dx, and
    the first probe's primal doubles as the value evaluation.
    """
    x = np.asarray(x, dtype=np.float64)
    k, d = x.shape
    pmap = model._pmap(use_ema)
    ju = np.empty((k, d, d))
    u = None
    for j in range(d):
        seed_dir = np.zeros((k, d))
        seed_dir[:, j] = 1.0
        out = model.apply(pmap, Dual(x, seed_dir), float(s), float(t))
        ju[:, :, j] = out.tangent
        if j == 0:
            u = out.primal
    dt = t - s
    x_next = x + dt * u
    jac = dt * ju
    jac[:, np.arange(d), np.arange(d)] += 1.0
    return x_next, jac


def flow_step(model, x, s: float, t: float, use_ema: bool = True, keep_jacobian: bool = False) -> StepResult:
    x_next, jac = step_jacobian(model, x, s, t, use_ema=use_ema)
    sign, logabs = np.linalg.slogdet(jac)
    valid = (sign != 0) & (logabs > LOG_DET_FLOOR) & np.isfinite(logabs)
    d = x.shape[1]
    return StepResult(
        x_next=x_next,
        logdet=logabs,
        valid=valid,
        nfe_per_sample=d + 1,
        jac=jac if keep_jacobian else None,
    )


def transport_with_logdet(model, times: np.ndarray, x: np.ndarray, use_ema: bool = True):
    """Run consecutive steps over ``times`` (any monotone direction),
    accumulating log|det J| of each step map at its input point.

    Returns (x_final, logdet_sum, valid, nfe_per_sample).
    """
    times = np.asarray(times, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    k, d = x.shape
    logdet_sum = np.zeros(k)
    valid = np.ones(k, dtype=bool)
    nfe = 0
    for s, t in zip(times[:-1], times[1:]):
        res = flow_step(model, x, float(s), float(t), use_ema=use_ema)
        x = res.x_next
        logdet_sum += res.logdet
        valid &= res.valid
        valid &= np.all(np.isfinite(x), axis=1)
        nfe += res.nfe_per_sample
    return x, logdet_sum, valid, nfe


def sample_with_likelihood(
    model, grid: TimeGrid, k: int, seed: int, target=None, use_ema: bool = True
) -> WeightedSampleSet:
    """Draw prior samples and transport them prior -> data through the grid,
    tracking exact log-likelihoods step by step."""
    rng = stream(seed, "flowmap-prior")
    x0 = rng.standard_normal((int(k), model.dim))
    logp = prior_logp(x0)
    times = grid.flow_ascending()
    x, logdet_sum, valid, nfe_per_sample = transport_with_logdet(model, times, x0, use_ema=use_ema)
    logp = logp - logdet_sum
    if target is not None:
        energy = target.energy(x)
    else:
        energy = np.zeros(x.shape[0])
    logw = -energy - logp
    valid = valid & np.isfinite(logp) & np.isfinite(logw) & np.isfinite(energy)
    return WeightedSampleSet(
        x=x,
        logp_model=logp,
        energy=energy,
        logw=logw,
        valid=valid,
        nfe_total=nfe_per_sample * int(k),
        meta={
            "sampler": "flowmap",
            "grid_kind": grid.kind,
            "grid_times": grid.times.tolist(),
            "n_steps": grid.n_steps,
            "seed": int(seed),
            "nfe_per_sample": nfe_per_sample,
            "n_invalid": int((~valid).sum()),
        },
    )


def round_trip_error(model, grid: TimeGrid, k: int, seed: int, use_ema: bool = True) -> dict:
    """Prior -> data -> prior reconstruction error of the composed map."""
    rng = stream(seed, "roundtrip-prior")
    x0 = rng.standard_normal((int(k), model.dim))
    up = grid.flow_ascending()
    x1 = x0
    for s, t in zip(up[:-1], up[1:]):
        x1 = model.step(x1, float(s), float(t), use_ema=use_ema)
    down = grid.flow_descending()
    xr = x1
    for s, t in zip(down[:-1], down[1:]):
        xr = model.step(xr, float(s), float(t), use_ema=use_ema)
    err = np.linalg.norm(x0 - xr, axis=1)
    return {
        "mean": float(err.mean()),
        "max": float(err.max()),
        "median": float(np.median(err)),
        "n": int(k),
    }


def likelihood_of(
    model,
    grid: TimeGrid,
    x: np.ndarray,
    use_ema: bool = True,
    round_trip_threshold: float = 1e-1,
):
    """Log-density of given data points under the model.

    Maps data -> prior with the backward steps, accumulating +log|det| of
    each backward step map, then adds the prior log-density at the recovered
    latent. Exact when the map is exactly invertible; otherwise the result
    is approximate and flagged via the forward-reconstruction diagnostic.
    """
    x = np.asarray(x, dtype=np.float64)
    y, logdet_sum, valid, nfe_per_sample = transport_with_logdet(
        model, grid.flow_descending(), x, use_ema=use_ema
    )
    logp = prior_logp(y) + logdet_sum

    # push the recovered latents forward again to measure invertibility here
    up = grid.flow_ascending()
    xf = y
    for s, t in zip(up[:-1], up[1:]):
        xf = model.step(xf, float(s), float(t), use_ema=use_ema)
    recon = np.linalg.norm(x - xf, axis=1)
    diag = {
        "reconstruction_mean": float(recon.mean()),
        "reconstruction_max": float(recon.max()),
        "approximate": bool(recon.mean() >= round_trip_threshold),
        "valid": valid,
        "nfe_per_sample": nfe_per_sample,
    }
    return logp, diag


# ---------------------------------------------------------------------------
# Sample-set files: CSV body plus JSON sidecar
# ---------------------------------------------------------------------------


def write_sample_set(prefix, samples: WeightedSampleSet, extra_meta: dict | None = None):
    """Write <prefix>.csv (deterministic body) and <prefix>.json sidecar."""
    prefix = Path(prefix)
    d = samples.x.shape[1]
    csv_path = prefix.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        cols = [f"x_{i}" for i in range(d)] + ["logp_model", "energy", "logw", "valid"]
        fh.write(",".join(cols) + "\n")
        for i in range(samples.x.shape[0]):
            row = [repr(float(v)) for v in samples.x[i]]
            row += [
                repr(float(samples.logp_model[i])),
                repr(float(samples.energy[i])),
                repr(float(samples.logw[i])),
                str(int(samples.valid[i])),
            ]
            fh.write(",".join(row) + "\n")
    meta = dict(samples.meta)
    meta["nfe_total"] = samples.nfe_total
    meta["n_samples"] = int(samples.x.shape[0])
    meta["n_valid"] = samples.n_valid
    if extra_meta:
        meta.update(extra_meta)
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return csv_path, json_path


def read_sample_set(csv_path) -> WeightedSampleSet:
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    d = sum(1 for c in header if c.startswith("x_"))
    json_path = Path(csv_path).with_suffix(".json")
    meta = json.loads(json_path.read_text()) if json_path.exists() else {}
    return WeightedSampleSet(
        x=data[:, :d],
        logp_model=data[:, d],
        energy=data[:, d + 1],
        logw=data[:, d + 2],
        valid=data[:, d + 3].astype(bool),
        nfe_total=int(meta.get("nfe_total", 0)),
        meta=meta,
    )
