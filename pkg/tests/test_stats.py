from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ttsalab.engine import Ensemble, SimConfig, Trajectory, simulate, simulate_ensemble
from ttsalab.errors import DesignError, PairingError, ResolutionError
from ttsalab.model import random_instance
from ttsalab.stats import (
    ALPHA_AND_BETA,
    BETA_ONLY,
    TailAverageResult,
    bootstrap,
    estimate_bias_variance,
    extrapolate,
    fit_scaling,
    tail_average,
    tail_average_curve,
    warmup,
)

SMALL = random_instance(2, 2, 3, 0)


def synthetic_ensemble(x, y, alpha=0.01, beta=0.1, instance=SMALL):
    """Wrap arrays of shape (R, K, d) recorded at every step into an Ensemble."""
    r, k = x.shape[:2]
    cfg = SimConfig(alpha, beta, k - 1, record_every=1)
    return Ensemble(instance, cfg, np.arange(k), x, y, np.zeros((r, k), dtype=np.int64),
                    None, None, np.full(r, -1))


def synthetic_trajectory(x, y):
    k = x.shape[0]
    cfg = SimConfig(0.01, 0.1, k - 1, record_every=1)
    return Trajectory(np.arange(k), x, y, np.zeros(k, dtype=np.int64), cfg)


# -- tail_average -------------------------------------------------------------

def test_constant_path():
    c = np.array([1.5, -2.0])
    tr = synthetic_trajectory(np.tile(c, (11, 1)), np.tile(c, (11, 1)))
    ta = tail_average(tr, 3, 10)
    np.testing.assert_array_equal(ta.x_tilde, c)


def test_linear_path_midpoint():
    ramp = np.arange(11.0)[:, None] * np.ones(2)
    ta = tail_average(synthetic_trajectory(ramp, ramp), 0, 10)
    np.testing.assert_array_equal(ta.x_tilde, [5.0, 5.0])
    # both endpoints are included: mean of 4..10 is 7
    assert tail_average(synthetic_trajectory(ramp, ramp), 4, 10).x_tilde[0] == 7.0


def test_unrecorded_window_rejected():
    cfg = SimConfig(0.01, 0.1, 100, record_every=10, seed=1)
    tr = simulate(SMALL, cfg)
    with pytest.raises(ResolutionError):
        tail_average(tr, 10, 50)
    with pytest.raises(ResolutionError):
        tail_average(tr, 0, 200)
    with pytest.raises(ValueError):
        tail_average(tr, 50, 50)


def test_in_kernel_tail_matches_dense_average():
    cfg = SimConfig(0.01, 0.1, 400, record_every=1, seed=2, tail_start=100)
    tr = simulate(SMALL, cfg)
    dense = tr.x[100:301].mean(axis=0)
    via_tail = tail_average(tr, 100, 300).x_tilde
    np.testing.assert_allclose(via_tail, dense, rtol=1e-12, atol=1e-14)
    t, xt, _ = tail_average_curve(simulate_ensemble(SMALL, cfg, 2, threads=1))
    assert t[0] == 100 and xt.shape[:2] == (2, 301)


def test_warmup_rounding():
    assert warmup(0.001, 2.0) == 5000
    assert warmup(0.001, 2.0, multiple=3000) == 6000


@given(st.integers(0, 2**31), st.floats(-1e3, 1e3), st.integers(0, 20), st.integers(1, 20))
def test_translation_equivariance(seed, shift, t0, length):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((3, 45, 2))
    y = gen.standard_normal((3, 45, 2))
    t = t0 + length
    base = tail_average(synthetic_ensemble(x, y), t0, t)
    moved = tail_average(synthetic_ensemble(x + shift, y - shift), t0, t)
    np.testing.assert_allclose(moved.x_tilde, base.x_tilde + shift, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(moved.y_tilde, base.y_tilde - shift, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(moved.per_replica_x, base.per_replica_x + shift, rtol=1e-12, atol=1e-9)


# -- extrapolate --------------------------------------------------------------

def _ta(x, y, alpha, beta):
    return TailAverageResult(10, 20, np.asarray(x, float), np.asarray(y, float), alpha, beta)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.lists(st.floats(-10, 10), min_size=2, max_size=2),
       st.floats(1e-4, 0.1), st.sampled_from([ALPHA_AND_BETA, BETA_ONLY]))
def test_extrapolation_cancels_first_order(theta, coef, beta, mode):
    theta, coef = np.array(theta), np.array(coef)
    alpha = beta / 10
    b_alpha = 2 * alpha if mode == ALPHA_AND_BETA else alpha
    a = _ta(theta + coef * beta, theta - coef * beta, alpha, beta)
    b = _ta(theta + coef * 2 * beta, theta - coef * 2 * beta, b_alpha, 2 * beta)
    res = extrapolate(a, b, mode)
    np.testing.assert_allclose(res.zeta_x, theta, rtol=0, atol=1e-12 * (1 + np.abs(theta).max()))
    np.testing.assert_allclose(res.zeta_y, theta, rtol=0, atol=1e-12 * (1 + np.abs(theta).max()))


def test_pairing_errors():
    a = _ta([0.0], [0.0], 0.01, 0.1)
    with pytest.raises(PairingError):
        extrapolate(a, _ta([0.0], [0.0], 0.03, 0.2), ALPHA_AND_BETA)
    with pytest.raises(PairingError):
        extrapolate(a, _ta([0.0], [0.0], 0.02, 0.2), BETA_ONLY)
    with pytest.raises(PairingError):
        extrapolate(a, TailAverageResult(0, 20, np.zeros(1), np.zeros(1), 0.02, 0.2), ALPHA_AND_BETA)
    with pytest.raises(ValueError):
        extrapolate(a, a, "gamma-only", check=False)


def test_degenerate_equal_inputs():
    a = _ta([1.25, -3.0], [2.0, 0.5], 0.01, 0.1)
    res = extrapolate(a, a, check=False)
    np.testing.assert_array_equal(res.zeta_x, a.x_tilde)
    np.testing.assert_array_equal(res.zeta_y, a.y_tilde)


def test_replica_wise_combination():
    gen = np.random.default_rng(3)
    x1, x2 = gen.standard_normal((2, 4, 30, 2))
    e1 = synthetic_ensemble(x1, x1, 0.01, 0.1)
    e2 = synthetic_ensemble(x2, x2, 0.02, 0.2)
    res = extrapolate(tail_average(e1, 5, 25), tail_average(e2, 5, 25))
    ref = 2 * x1[:, 5:26].mean(axis=1) - x2[:, 5:26].mean(axis=1)
    np.testing.assert_allclose(res.per_replica_x, ref, rtol=1e-12)
    np.testing.assert_allclose(res.zeta_x, ref.mean(axis=0), rtol=1e-12)


# -- estimate_bias_variance ---------------------------------------------------

def test_mse_identity_and_bias_on_synthetic_data():
    gen = np.random.default_rng(4)
    x = 0.3 + gen.standard_normal((40, 21, 2))
    y = -0.1 + gen.standard_normal((40, 21, 2))
    ens = synthetic_ensemble(x, y)
    est = estimate_bias_variance(ens, 0, 20, x_ref=np.zeros(2), y_ref=np.zeros(2), n_boot=200)
    per = x.mean(axis=1)
    np.testing.assert_allclose(est.bias_x, per.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(est.bias_x_se, per.std(axis=0, ddof=1) / np.sqrt(40), rtol=1e-12)
    assert est.mse_x == pytest.approx(float(est.bias_x @ est.bias_x) + est.spread_x, rel=1e-12)
    assert est.mse_y == pytest.approx(float(est.bias_y @ est.bias_y) + est.spread_y, rel=1e-12)
    assert est.var_x == pytest.approx(np.trace(np.cov(x[:, 20], rowvar=False)), rel=1e-12)
    lo, hi = est.var_x_ci
    assert lo <= est.var_x <= hi and est.var_x_se > 0
    assert not est.low_replica_warning


def test_zero_noise_estimate(zero_noise_instance):
    inst = zero_noise_instance
    cfg = SimConfig(0.01, 0.1, 200, record_every=1, x0=tuple(inst.x_star), y0=tuple(inst.y_star), seed=5)
    ens = simulate_ensemble(inst, cfg, 30, threads=1)
    est = estimate_bias_variance(ens, 50, 200, n_boot=50)
    assert np.abs(est.bias_x).max() < 1e-12 and np.abs(est.bias_ybar).max() < 1e-12
    assert est.var_x < 1e-24 and est.var_y < 1e-24


def test_low_replica_warning():
    gen = np.random.default_rng(5)
    x = gen.standard_normal((5, 11, 2))
    with pytest.warns(UserWarning, match="replicas"):
        est = estimate_bias_variance(synthetic_ensemble(x, x), 0, 10, n_boot=20)
    assert est.low_replica_warning


def test_diverged_replicas_rejected():
    gen = np.random.default_rng(6)
    x = gen.standard_normal((30, 11, 2))
    ens = synthetic_ensemble(x, x)
    ens.diverged_at[3] = 5
    with pytest.raises(ResolutionError):
        tail_average(ens, 0, 10)


def test_bootstrap_standard_error_of_mean():
    gen = np.random.default_rng(7)
    data = gen.standard_normal(400)
    se, (lo, hi) = bootstrap(data, np.mean, n_boot=2000, seed=1)
    assert se == pytest.approx(data.std(ddof=1) / 20, rel=0.1)
    assert lo < data.mean() < hi
    assert bootstrap(data, np.mean, n_boot=100, seed=2) == bootstrap(data, np.mean, n_boot=100, seed=2)


# -- fit_scaling --------------------------------------------------------------

def test_linear_fit_exact():
    g = np.array([0.01, 0.02, 0.04, 0.08])
    rep = fit_scaling(g, 3.0 * g, model="linear", quantity="bias_x")
    assert rep.param("slope") == pytest.approx(3.0, abs=1e-10)
    assert rep.r_squared == pytest.approx(1.0)


def test_affine_fit_two_columns():
    g = np.array([[1e-4, 0.03], [3e-4, 0.05], [5e-4, 0.07], [2e-4, 0.03], [4e-4, 0.06]])
    y = 0.5 + 2.0 * g[:, 0] - 7.0 * g[:, 1]
    rep = fit_scaling(g, y, se=np.full(5, 0.01))
    np.testing.assert_allclose(rep.params, [0.5, 2.0, -7.0], atol=1e-9)
    assert rep.param_names == ["intercept", "slope_0", "slope_1"]


def test_power_and_exponential_fits():
    g = np.array([0.01, 0.02, 0.04, 0.08])
    rep = fit_scaling(g, 2.0 * g**1.5, model="power", band=("exponent", 1.4, 1.6))
    assert rep.param("exponent") == pytest.approx(1.5, abs=1e-10) and rep.passed
    t = np.arange(5.0)
    rep = fit_scaling(t, 3.0 * np.exp(-0.2 * t), model="exponential", band=("rate", -np.inf, -0.3))
    assert rep.param("rate") == pytest.approx(-0.2, abs=1e-12) and rep.passed is False


def test_fit_design_errors():
    with pytest.raises(DesignError):
        fit_scaling([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(DesignError):
        fit_scaling([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DesignError):
        fit_scaling([1.0, 2.0, 3.0], [1.0, -2.0, 3.0], model="power")
    with pytest.raises(ValueError):
        fit_scaling([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], model="cubic")


def test_report_serialization():
    g = np.array([1.0, 2.0, 3.0])
    rep = fit_scaling(g, 1.0 + g, se=np.array([0.1, 0.1, 0.1]), quantity="q", band=("slope", 0.9, 1.1))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "grid_value,measured,se,fitted,residual" and len(lines) == 4
    doc = rep.to_dict()
    assert doc["passed"] is True and doc["params"]["slope"] == pytest.approx(1.0)
    assert rep.to_json() == rep.to_json()


@given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(-5, 5))
def test_affine_fit_recovers_noiseless_line(seed, c0, c1):
    g = np.sort(np.random.default_rng(seed).uniform(0.01, 1.0, 6))
    if np.ptp(g) < 1e-3:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = fit_scaling(g, c0 + c1 * g)
    np.testing.assert_allclose(rep.params, [c0, c1], atol=1e-8)
