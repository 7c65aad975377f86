import numpy as np
import pytest

from flowmapbg.cnf_baseline import (
    IntegrationFailure,
    OdeConfig,
    TraceProbe,
    cnf_sample_and_likelihood,
    dopri45,
    euler_sample_and_likelihood,
    rademacher,
)
from flowmapbg.flowmap_sampler import prior_logp
from flowmapbg.model import FlowMapModel
from flowmapbg.targets import gmm2d

from helpers import constant_u_model, identity_u_model, tiny_config


def randomized_model(dim=2, seed=0, scale=0.4):
    model = FlowMapModel(tiny_config(dim=dim), seed=seed)
    rng = np.random.default_rng(seed + 77)
    model.params.set("w_out", rng.normal(size=model.params.get("w_out").shape) * scale)
    model.ema_params.values[:] = model.params.values
    return model


# ---------------------------------------------------------------------------
# dopri45
# ---------------------------------------------------------------------------


def test_dopri45_exponential_growth():
    cfg = OdeConfig(atol=1e-6, rtol=1e-6)
    res = dopri45(lambda y, t: y, np.array([1.0]), (0.0, 1.0), cfg)
    e = np.e
    assert abs(res.y[0] - e) <= cfg.atol + cfg.rtol * e


def test_dopri45_zero_field_single_step():
    calls = []
    res = dopri45(lambda y, t: calls.append(t) or np.zeros_like(y), np.array([2.0, -1.0]), (0.0, 1.0), OdeConfig())
    np.testing.assert_array_equal(res.y, [2.0, -1.0])
    assert res.accepted == 1
    assert res.rejected == 0


def test_dopri45_exponential_decay_tight():
    cfg = OdeConfig(atol=1e-8, rtol=1e-8)
    res = dopri45(lambda y, t: -y, np.array([1.0]), (0.0, 1.0), cfg)
    assert abs(res.y[0] - np.exp(-1.0)) < 1e-7


def test_dopri45_counts_rejections_and_nfe():
    cfg = OdeConfig(atol=1e-9, rtol=1e-9)
    res = dopri45(lambda y, t: np.sin(10 * t) * y, np.array([1.0]), (0.0, 1.0), cfg)
    assert res.rejected >= 1  # optimistic first step cannot satisfy 1e-9
    assert res.nfe == 1 + 6 * (res.accepted + res.rejected)


def test_dopri45_nfe_monotone_in_tolerance():
    rng = np.random.default_rng(42)
    rates = rng.uniform(2.0, 8.0, size=5)
    means = []
    for tol in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
        cfg = OdeConfig(atol=tol, rtol=tol)
        nfes = [
            dopri45(lambda y, t: np.cos(r * t) * y - 0.5 * y, np.array([1.0, 0.3]), (0.0, 1.0), cfg).nfe
            for r in rates
        ]
        means.append(np.mean(nfes))
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_dopri45_max_steps_failure_carries_partial_state():
    cfg = OdeConfig(atol=1e-12, rtol=1e-12, max_steps=3)
    with pytest.raises(IntegrationFailure) as err:
        dopri45(lambda y, t: np.cos(40 * t) * (y + 1), np.array([1.0]), (0.0, 1.0), cfg)
    assert err.value.nfe > 0


def test_dopri45_rejects_bad_span_and_tolerance():
    with pytest.raises(ValueError):
        dopri45(lambda y, t: y, np.array([1.0]), (1.0, 0.0), OdeConfig())
    with pytest.raises(ValueError):
        OdeConfig(atol=0.0)


# ---------------------------------------------------------------------------
# CNF sampling + likelihood
# ---------------------------------------------------------------------------


def test_cnf_zero_field_keeps_prior():
    model = constant_u_model(dim=2, c=0.0)
    out = cnf_sample_and_likelihood(model, k=32, seed=1, target=gmm2d(), use_ema=False)
    np.testing.assert_allclose(out.logp_model, prior_logp(out.x), atol=1e-12)
    assert out.n_valid == 32


def test_cnf_linear_field_analytic_oracle():
    # v(x) = x: x(1) = e * x(0); trace = d so logp drops by d = 2
    model = identity_u_model(dim=2)
    cfg = OdeConfig(atol=1e-8, rtol=1e-8)
    out = cnf_sample_and_likelihood(model, k=16, seed=2, cfg=cfg, use_ema=False)
    from flowmapbg.streams import stream

    x0 = stream(2, "cnf-prior").standard_normal((16, 2))
    np.testing.assert_allclose(out.x, np.e * x0, rtol=1e-7)
    np.testing.assert_allclose(out.logp_model - prior_logp(x0), -2.0, atol=1e-6)


class _ContractedField:
    """v'(x, tau) = v(x, tau) - 2x: shifts the trace by -2d while keeping the
    MLP's off-diagonal Jacobian structure (and the probe noise) intact."""

    def __init__(self, inner):
        self.inner = inner
        self.dim = inner.dim

    def _pmap(self, use_ema):
        return self.inner._pmap(use_ema)

    def apply(self, pmap, x, s, t):
        from flowmapbg import autodiff as ad

        return ad.sub(self.inner.apply(pmap, x, s, t), ad.mul(x, 2.0))


def test_cnf_hutchinson_mean_matches_exact():
    model = _ContractedField(randomized_model(seed=3))
    cfg = OdeConfig(atol=1e-4, rtol=1e-4)
    exact = cnf_sample_and_likelihood(
        model, k=1, seed=4, cfg=cfg, trace=TraceProbe("exact"), use_ema=False
    )
    # 10^4 repetitions of the same trajectory: identical starts, one
    # independent Rademacher probe per row held fixed along the integration
    from flowmapbg.streams import stream

    z0 = stream(4, "cnf-prior").standard_normal((1, 2))
    x0 = np.repeat(z0, 10_000, axis=0)
    hutch = cnf_sample_and_likelihood(
        model, k=10_000, seed=5, cfg=cfg, trace=TraceProbe("hutchinson"), use_ema=False, x0=x0
    )
    delta_exact = float(exact.logp_model[0] - prior_logp(z0)[0])
    delta_hutch = float(np.mean(hutch.logp_model - prior_logp(x0)))
    assert abs(delta_hutch - delta_exact) / abs(delta_exact) < 0.01


def test_cnf_hutchinson_stage_refresh_runs_at_loose_tolerance():
    model = randomized_model(seed=13)
    cfg = OdeConfig(atol=1e-2, rtol=1e-2, max_steps=5000)
    out = cnf_sample_and_likelihood(
        model,
        k=8,
        seed=14,
        cfg=cfg,
        trace=TraceProbe("hutchinson", probe_refresh="stage"),
        use_ema=False,
    )
    assert np.all(np.isfinite(out.logp_model))
    assert out.meta["probe_refresh"] == "stage"


def test_cnf_nfe_accounting_exact_vs_hutchinson():
    model = randomized_model(seed=5)
    out_e = cnf_sample_and_likelihood(model, k=8, seed=6, trace=TraceProbe("exact"), use_ema=False)
    out_h = cnf_sample_and_likelihood(
        model, k=8, seed=6, trace=TraceProbe("hutchinson"), use_ema=False
    )
    calls_e = out_e.meta["field_calls"]
    calls_h = out_h.meta["field_calls"]
    assert out_e.nfe_per_sample == calls_e * (1 + 2)
    assert out_h.nfe_per_sample == calls_h * 2


def test_cnf_failure_message():
    model = randomized_model(seed=7)
    cfg = OdeConfig(atol=1e-13, rtol=1e-13, max_steps=2)
    with pytest.raises(RuntimeError, match="aborted"):
        cnf_sample_and_likelihood(model, k=4, seed=8, cfg=cfg, use_ema=False)


# ---------------------------------------------------------------------------
# Euler
# ---------------------------------------------------------------------------


def test_euler_zero_field_any_steps():
    model = constant_u_model(dim=2, c=0.0)
    for n in (1, 7):
        out = euler_sample_and_likelihood(model, n_steps=n, k=16, seed=9, use_ema=False)
        np.testing.assert_allclose(out.logp_model, prior_logp(out.x), atol=1e-12)


def test_euler_single_step_doubles_with_first_order_logdet():
    model = identity_u_model(dim=2)
    from flowmapbg.streams import stream

    x0 = stream(10, "euler-prior").standard_normal((32, 2))
    out = euler_sample_and_likelihood(model, n_steps=1, k=32, seed=10, use_ema=False)
    np.testing.assert_allclose(out.x, 2.0 * x0, atol=1e-12)
    delta = out.logp_model - prior_logp(x0)
    # first-order estimate -d, vs the exact -d ln 2 of the map it applied
    np.testing.assert_allclose(delta, -2.0, atol=1e-12)
    assert abs(delta[0] - (-2.0 * np.log(2.0))) > 0.5


def test_euler_fine_grid_converges_to_continuous_value():
    model = identity_u_model(dim=2)
    n = 256
    out = euler_sample_and_likelihood(model, n_steps=n, k=8, seed=11, use_ema=False)
    from flowmapbg.streams import stream

    x0 = stream(11, "euler-prior").standard_normal((8, 2))
    delta = out.logp_model - prior_logp(x0)
    np.testing.assert_allclose(delta, -2.0, atol=1e-12)
    # the map actually applied multiplies by (1 + 1/n)^n; its exact logdet is
    # within 1e-2 of the continuous value by n = 256
    exact_map_logdet = 2.0 * n * np.log1p(1.0 / n)
    assert abs(-exact_map_logdet - delta[0]) < 1e-2
    assert out.nfe_per_sample == n * 3


def test_euler_validates_steps():
    with pytest.raises(ValueError):
        euler_sample_and_likelihood(identity_u_model(), n_steps=0, k=4, seed=0)


# ---------------------------------------------------------------------------
# Hutchinson estimator on fixed matrices
# ---------------------------------------------------------------------------


def test_hutchinson_unbiased_on_fixed_diagonal():
    rng = np.random.default_rng(12)
    j = np.diag([1.0, 2.0, 3.0])
    eps = rademacher(rng, (100_000, 3))
    est = np.mean(np.sum(eps * (eps @ j.T), axis=1))
    assert abs(est - 6.0) / 6.0 < 0.01


def test_rademacher_values():
    draws = rademacher(np.random.default_rng(13), (1000,))
    assert set(np.unique(draws)) == {-1.0, 1.0}
    assert abs(draws.mean()) < 0.1
