import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmapbg.boltzmann import (
    ess,
    mode_indicator_observable,
    snis,
    snis_resample,
    torus_cost_matrix,
    w2_energy,
    w2_torus,
)
from flowmapbg.targets import gmm2d

TWO_PI = 2.0 * np.pi


def sample_set(x, logw, valid=None):
    x = np.asarray(x, dtype=np.float64)
    if valid is None:
        valid = np.ones(x.shape[0], dtype=bool)
    return SimpleNamespace(x=x, logw=np.asarray(logw, dtype=np.float64), valid=valid)


# ---------------------------------------------------------------------------
# ESS
# ---------------------------------------------------------------------------


def test_ess_uniform_weights():
    assert ess(np.log([1.0, 1.0, 1.0, 1.0])) == pytest.approx(1.0)


def test_ess_point_mass():
    with np.errstate(divide="ignore"):
        logw = np.log(np.array([1.0, 0.0, 0.0, 0.0]))
    assert ess(logw) == pytest.approx(0.25)


def test_ess_hand_case():
    assert ess(np.log([2.0, 1.0, 1.0])) == pytest.approx(16.0 / 18.0, abs=1e-12)


def test_ess_shift_invariance():
    rng = np.random.default_rng(0)
    logw = rng.normal(size=100)
    base = ess(logw)
    assert ess(logw + 500.0) == pytest.approx(base, abs=1e-12)
    assert ess(logw - 500.0) == pytest.approx(base, abs=1e-12)


def test_ess_bounds():
    rng = np.random.default_rng(1)
    for _ in range(20):
        val = ess(rng.normal(size=50))
        assert 0.0 < val <= 1.0


def test_ess_rejects_degenerate():
    with pytest.raises(ValueError):
        ess(np.array([-np.inf, -np.inf]))
    with pytest.raises(ValueError):
        ess(np.array([np.nan, 0.0]))


# ---------------------------------------------------------------------------
# SNIS
# ---------------------------------------------------------------------------


def test_snis_uniform_weights_is_plain_mean():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 2))
    samples = sample_set(x, np.full(50, -3.7))
    est = snis(
        mode_indicator_observable(gmm2d()), samples
    )
    freq = np.mean(gmm2d().assign_modes(x) == 0)
    assert est.value[0] == pytest.approx(freq, abs=1e-12)
    assert est.ess == pytest.approx(1.0)


def test_snis_single_valid_sample():
    x = np.array([[5.0, 0.0], [99.0, 99.0]])
    samples = sample_set(x, np.array([0.0, np.nan]), valid=np.array([True, False]))
    est = snis(mode_indicator_observable(gmm2d()), samples)
    np.testing.assert_array_equal(est.value, [0.0, 1.0])
    assert est.n_valid == 1
    assert est.ess == pytest.approx(1.0)


def test_snis_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 2))
    logw = rng.normal(size=200)
    est0 = snis(mode_indicator_observable(gmm2d()), sample_set(x, logw))
    est1 = snis(mode_indicator_observable(gmm2d()), sample_set(x, logw + 500.0))
    np.testing.assert_allclose(est0.value, est1.value, atol=1e-12)


def test_snis_recovers_biased_mode_weights():
    # proposal draws (0.5, 0.5) but the target is (0.7, 0.3); exact densities
    # on both sides make the weights exact
    target = gmm2d()
    proposal = target.with_weights([0.5, 0.5])
    rng = np.random.default_rng(4)
    k = 100_000
    x = proposal.exact_sample(rng, k)
    logw = -target.energy(x) - proposal.exact_logp(x)
    est = snis(mode_indicator_observable(target), sample_set(x, logw))
    for j, truth in enumerate((0.7, 0.3)):
        assert abs(est.value[j] - truth) < 3 * est.standard_error[j]


def test_snis_requires_valid_rows():
    samples = sample_set(np.zeros((3, 2)), np.zeros(3), valid=np.zeros(3, dtype=bool))
    with pytest.raises(ValueError):
        snis(mode_indicator_observable(gmm2d()), samples)


def test_snis_resample_concentrates_on_heavy_rows():
    x = np.array([[0.0, 0.0], [1.0, 1.0]])
    samples = sample_set(x, np.array([0.0, -30.0]))
    out = snis_resample(np.random.default_rng(5), samples, k=500)
    assert np.mean(np.all(out == 0.0, axis=1)) > 0.99


# ---------------------------------------------------------------------------
# 1-D energy Wasserstein
# ---------------------------------------------------------------------------


def test_w2_energy_identical():
    a = np.array([0.3, -1.0, 2.0])
    assert w2_energy(a, a) == 0.0


def test_w2_energy_rigid_shift():
    assert w2_energy([0.0, 0.0], [3.0, 3.0]) == pytest.approx(3.0)


def test_w2_energy_hand_case():
    assert w2_energy([0.0, 1.0], [0.0, 3.0]) == pytest.approx(np.sqrt(2.0))


def test_w2_energy_unequal_sizes_runs():
    rng = np.random.default_rng(6)
    a = rng.normal(size=101)
    b = rng.normal(size=999)
    val = w2_energy(a, b)
    assert np.isfinite(val)
    assert val == pytest.approx(w2_energy(b, a))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_w2_energy_metric_properties(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 40))
    ab, ba = w2_energy(a, b), w2_energy(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert ab <= w2_energy(a, c) + w2_energy(c, b) + 1e-12


def test_w2_energy_rejects_empty():
    with pytest.raises(ValueError):
        w2_energy([], [1.0])


# ---------------------------------------------------------------------------
# Torus Wasserstein
# ---------------------------------------------------------------------------


def test_w2_torus_identical_points():
    rng = np.random.default_rng(7)
    a = rng.uniform(0, TWO_PI, size=(10, 4))
    assert w2_torus(a, a) == pytest.approx(0.0, abs=1e-12)


def test_w2_torus_wrapped_distance():
    a = np.array([[0.05]])
    b = np.array([[TWO_PI - 0.05]])
    assert w2_torus(a, b) == pytest.approx(0.1, abs=1e-12)


def test_w2_torus_two_point_symmetric_matching():
    a = np.array([[0.0], [np.pi]])
    b = np.array([[0.1], [np.pi + 0.1]])
    cost = torus_cost_matrix(a, b)
    brute = min(
        np.mean([cost[0, p[0]], cost[1, p[1]]]) for p in itertools.permutations(range(2))
    )
    assert w2_torus(a, b) == pytest.approx(np.sqrt(brute), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 6), seed=st.integers(0, 2**31 - 1))
def test_w2_torus_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, TWO_PI, size=(n, 2))
    b = rng.uniform(0, TWO_PI, size=(n, 2))
    cost = torus_cost_matrix(a, b)
    brute = min(
        np.mean([cost[i, p[i]] for i in range(n)]) for p in itertools.permutations(range(n))
    )
    assert w2_torus(a, b) == pytest.approx(np.sqrt(brute), abs=1e-10)


def test_w2_torus_subsamples_large_sets():
    rng = np.random.default_rng(8)
    a = rng.uniform(0, TWO_PI, size=(3000, 2))
    b = rng.uniform(0, TWO_PI, size=(2500, 2))
    val = w2_torus(a, b, max_points=256)
    assert np.isfinite(val)


def test_w2_torus_dimension_mismatch():
    with pytest.raises(ValueError):
        w2_torus(np.zeros((3, 2)), np.zeros((3, 3)))
