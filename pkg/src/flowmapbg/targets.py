"""Analytic energy targets with exact samplers.

Each target exposes energy(x), an exact sampler, and (where the partition
function is known) the exact log-density, so likelihoods and importance
weights can be verified against closed forms.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.special import i0e, logsumexp

TWO_PI = 2.0 * np.pi


class EnergyTarget:
    """Base interface: subclasses fill in energy / sampling / density."""

    name: str = "target"
    dim: int
    is_toroidal: bool = False

    def energy(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def exact_logp(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no tractable normalizer")

    @property
    def has_exact_logp(self) -> bool:
        return type(self).exact_logp is not EnergyTarget.exact_logp

    def exact_sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


def _rows(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != dim:
        raise ValueError(f"expected points in R^{dim}, got shape {x.shape}")
    return x


class GaussianMixture(EnergyTarget):
    """Isotropic Gaussian mixture; Z = 1 so energy = -exact_logp."""

    def __init__(self, weights, means, sigma, name="gmm"):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        if self.means.ndim != 2:
            raise ValueError("means must be (modes, dim)")
        if self.weights.shape != (self.means.shape[0],):
            raise ValueError("one weight per mode required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        self.sigma = float(sigma)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.dim = self.means.shape[1]
        self.name = name

    def _component_logps(self, x):
        x = _rows(x, self.dim)
        d2 = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        lognorm = -0.5 * self.dim * np.log(TWO_PI * self.sigma**2)
        return lognorm - 0.5 * d2 / self.sigma**2

    def exact_logp(self, x):
        comp = self._component_logps(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(comp + logw[None, :], axis=1)

    def energy(self, x):
        return -self.exact_logp(x)

    def exact_sample(self, rng, k):
        comp = rng.choice(self.weights.size, size=k, p=self.weights)
        return self.means[comp] + self.sigma * rng.standard_normal((k, self.dim))

    def assign_modes(self, x):
        """Index of the nearest mode mean per row."""
        x = _rows(x, self.dim)
        d2 = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)

    def with_weights(self, weights) -> "GaussianMixture":
        return GaussianMixture(weights, self.means, self.sigma, name=self.name + "-reweighted")

    def spec(self):
        return {
            "kind": "gmm",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "sigma": self.sigma,
        }


def gmm2d(weights=(0.7, 0.3), means=((-2.5, 0.0), (2.5, 0.0)), cov_scale=0.5) -> GaussianMixture:
    """Desk-scale two-mode benchmark mixture in the plane."""
    return GaussianMixture(weights, means, cov_scale, name="gmm2d")


class DoubleWell(EnergyTarget):
    """E(x) = barrier*(x0^2 - 1)^2 + 0.5*sum(x_i^2, i > 0); Z unknown."""

    def __init__(self, dim=2, barrier=2.0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self.barrier = float(barrier)
        self.name = "double_well"
        # Gaussian envelope for rejection along x0; log-bound of
        # f/g maximized analytically at y = 0 or y^2 = 1 + 1/(4 b se^2)
        self._env_sigma = 1.5
        se2 = self._env_sigma**2
        b = self.barrier
        y2 = 1.0 + 1.0 / (4.0 * b * se2)
        phi_star = -b * (y2 - 1.0) ** 2 + y2 / (2.0 * se2)
        self._log_bound = max(-b, phi_star)

    def energy(self, x):
        x = _rows(x, self.dim)
        e = self.barrier * (x[:, 0] ** 2 - 1.0) ** 2
        if self.dim > 1:
            e = e + 0.5 * (x[:, 1:] ** 2).sum(axis=1)
        return e

    def exact_sample(self, rng, k):
        if self.dim > 4:
            raise NotImplementedError("rejection sampler supported for dim <= 4")
        out = np.empty((k, self.dim))
        if self.dim > 1:
            out[:, 1:] = rng.standard_normal((k, self.dim - 1))
        filled = 0
        b, se, se2 = self.barrier, self._env_sigma, self._env_sigma**2
        while filled < k:
            m = max(2 * (k - filled), 64)
            y = se * rng.standard_normal(m)
            log_accept = (-b * (y**2 - 1.0) ** 2 + y**2 / (2.0 * se2)) - self._log_bound
            keep = np.log(rng.uniform(size=m)) < log_accept
            ys = y[keep][: k - filled]
            out[filled : filled + ys.size, 0] = ys
            filled += ys.size
        return out

    def x0_unnormalized_density(self, y):
        """Unnormalized marginal along the double-well coordinate (oracle hook)."""
        return np.exp(-self.barrier * (np.asarray(y, dtype=np.float64) ** 2 - 1.0) ** 2)

    def spec(self):
        return {"kind": "double_well", "dim": self.dim, "barrier": self.barrier}


class VonMisesTorusMixture(EnergyTarget):
    """Mixture of products of von Mises densities on [0, 2pi)^dim; Z = 1."""

    is_toroidal = True

    def __init__(self, dim, modes, weights=None):
        self.dim = int(dim)
        self.mus = np.array([np.broadcast_to(m, (self.dim,)) for m, _ in modes], dtype=np.float64)
        self.kappas = np.array(
            [np.broadcast_to(k, (self.dim,)) for _, k in modes], dtype=np.float64
        )
        if np.any(self.kappas < 0):
            raise ValueError("concentrations must be non-negative")
        n_modes = self.mus.shape[0]
        if weights is None:
            weights = np.full(n_modes, 1.0 / n_modes)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (n_modes,) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must match modes and sum to 1")
        self.name = "vonmises_torus"

    def _wrap(self, x):
        # canonicalize before any trig so E(theta + 2pi) == E(theta) exactly
        return np.mod(_rows(x, self.dim), TWO_PI)

    def exact_logp(self, x):
        theta = self._wrap(x)
        # log I0 via the exponentially-scaled Bessel for large kappa
        log_i0 = np.log(i0e(self.kappas)) + self.kappas
        per_mode = (
            self.kappas[None, :, :] * np.cos(theta[:, None, :] - self.mus[None, :, :])
            - np.log(TWO_PI)
            - log_i0[None, :, :]
        ).sum(axis=2)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(per_mode + logw[None, :], axis=1)

    def energy(self, x):
        return -self.exact_logp(x)

    def exact_sample(self, rng, k):
        comp = rng.choice(self.weights.size, size=k, p=self.weights)
        draws = rng.vonmises(self.mus[comp], np.maximum(self.kappas[comp], 1e-300))
        flat = self.kappas[comp] == 0.0
        if np.any(flat):
            draws[flat] = rng.uniform(-np.pi, np.pi, size=int(flat.sum()))
        return np.mod(draws, TWO_PI)

    def with_weights(self, weights) -> "VonMisesTorusMixture":
        modes = list(zip(self.mus, self.kappas))
        return VonMisesTorusMixture(self.dim, modes, weights)

    def spec(self):
        return {
            "kind": "vonmises_torus",
            "dim": self.dim,
            "mus": self.mus.tolist(),
            "kappas": self.kappas.tolist(),
            "weights": self.weights.tolist(),
        }


def vonmises_torus(dim, modes, weights=None) -> VonMisesTorusMixture:
    """modes: sequence of (mu, kappa) pairs, each broadcastable to (dim,)."""
    return VonMisesTorusMixture(dim, modes, weights)


def make_target(spec: dict) -> EnergyTarget:
    kind = spec.get("kind")
    if kind == "gmm":
        return GaussianMixture(spec["weights"], spec["means"], spec["sigma"])
    if kind == "gmm2d":
        return gmm2d(
            tuple(spec.get("weights", (0.7, 0.3))),
            tuple(map(tuple, spec.get("means", ((-2.5, 0.0), (2.5, 0.0))))),
            spec.get("sigma", 0.5),
        )
    if kind == "double_well":
        return DoubleWell(spec.get("dim", 2), spec.get("barrier", 2.0))
    if kind == "vonmises_torus":
        modes = list(zip(spec["mus"], spec["kappas"]))
        return VonMisesTorusMixture(spec["dim"], modes, spec.get("weights"))
    raise ValueError(f"unknown target kind {kind!r}")


# ---------------------------------------------------------------------------
# Biased training sets
# ---------------------------------------------------------------------------


def write_samples_csv(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(",".join(f"x{i}" for i in range(x.shape[1])) + "\n")
        for row in x:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_samples_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        ncol = len(header.strip().split(","))
        return np.loadtxt(fh, delimiter=",", ndmin=2).reshape(-1, ncol)


def biased_training_set(target, bias_spec, n, seed, out_csv) -> np.ndarray:
    """Draw n samples with mode weights overridden by bias_spec and write
    them (plus metadata recording the bias) next to out_csv."""
    bias = np.asarray(bias_spec, dtype=np.float64)
    if not hasattr(target, "with_weights"):
        raise ValueError(f"{target.name} has no mixture weights to bias")
    biased = target.with_weights(bias)
    rng = np.random.default_rng(seed)
    x = biased.exact_sample(rng, int(n))
    out_csv = Path(out_csv)
    write_samples_csv(out_csv, x)
    meta = {
        "target": target.spec(),
        "bias_weights": bias.tolist(),
        "true_weights": np.asarray(target.weights).tolist(),
        "seed": int(seed),
        "n": int(n),
    }
    out_csv.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return x
