import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from chgpt.engine import simulate_paths
from chgpt.errors import CompensatorUndefinedError, ScenarioError
from chgpt.filtration import (
    NO_SWITCH,
    UNDETECTABLE,
    QvDerivativeEstimate,
    audit_adaptedness,
    build_jump_martingale,
    build_ybar,
    build_yhat,
    classify_nodes,
    detect_batch,
    detect_change_point,
    detection_rows,
    jump_martingale_for,
    realized_qv_derivative,
    reconstruct_from_ybar,
    recovered_regime,
)
from chgpt.model import (
    BoundedSigmoid,
    Constant,
    ConstantIntensity,
    Cox,
    Deterministic,
    IndependentLaw,
    RegimeCoefficients,
    TimeGrid,
    sample_tau_batch,
    tau_compensator,
)

from conftest import brownian, constant_coeffs, make_config, within_se

DISTINCT = constant_coeffs(0.0, 0.0, 0.2, 0.4)


# --------------------------------------------------------------------------
# realized variance


def test_realized_variance_of_scaled_brownian_motion():
    grid = TimeGrid(1.0, 4096)
    x = 0.3 * brownian(200, 4096, seed=1)
    est = realized_qv_derivative(x, grid, 64)
    interior = est.v2_hat[:, 64:]
    assert abs(interior.mean() / 0.09 - 1.0) < 0.05


def test_finite_variation_path_has_vanishing_variance():
    grid = TimeGrid(1.0, 4096)
    est = realized_qv_derivative(grid.times, grid, 64)
    assert np.nanmax(est.v2_hat) < 1e-3


def test_window_bounds():
    grid = TimeGrid(1.0, 256)
    with pytest.raises(ValueError):
        realized_qv_derivative(np.zeros(257), grid, 33)
    with pytest.raises(ValueError):
        realized_qv_derivative(np.zeros(257), grid, 1)
    est = realized_qv_derivative(np.zeros(257), grid, 32)
    assert np.all(np.isnan(est.v2_hat[:32])) and not np.any(np.isnan(est.v2_hat[32:]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), w=st.integers(2, 16), scale=st.floats(0.01, 3.0))
def test_realized_variance_is_nonnegative_and_backward(seed, w, scale):
    grid = TimeGrid(1.0, 128)
    x = scale * brownian(1, 128, seed=seed)[0]
    est = realized_qv_derivative(x, grid, w)
    assert np.all(est.v2_hat[w:] >= 0)
    k = int(np.random.default_rng(seed).integers(w, 128))
    # a window ending at k only sees increments up to k
    direct = np.sum(np.diff(x)[k - w:k] ** 2) / (w * grid.dt)
    assert est.v2_hat[k] == pytest.approx(direct, rel=1e-9, abs=1e-15)


# --------------------------------------------------------------------------
# detection


def _detect(cfg, w=64, r=3):
    out = simulate_paths(cfg)
    b = out.bundle
    est = realized_qv_derivative(b.x, cfg.grid, w)
    return b, detect_batch(est, cfg.coefficients, b.x, cfg.grid, r)


def test_detector_localises_a_known_switch():
    cfg = make_config(DISTINCT, Deterministic(0.5), n_steps=4096, paths=500, seed=2)
    b, res = _detect(cfg)
    tol = 2 * 64 * cfg.grid.dt
    hits = [r.detected and abs(r.tau_hat - 0.5) <= tol for r in res]
    assert np.mean(hits) >= 0.95


def test_identical_volatility_is_undetectable():
    cfg = make_config(constant_coeffs(0.0, 0.1, 0.3, 0.3), Deterministic(0.5), n_steps=512, paths=20)
    _, res = _detect(cfg, w=32)
    assert all(r.tau_hat == UNDETECTABLE for r in res)


def test_no_switch_gives_few_false_alarms():
    cfg = make_config(DISTINCT, Deterministic(5.0), n_steps=4096, paths=300, seed=4)
    _, res = _detect(cfg)
    assert np.mean([r.tau_hat == NO_SWITCH for r in res]) >= 0.95


def test_ties_go_to_the_first_regime():
    grid = TimeGrid(1.0, 64)
    v = np.full((1, 65), 0.5 * (0.2**2 + 0.4**2))
    cls, gap = classify_nodes(QvDerivativeEstimate(v, 2), DISTINCT, np.zeros((1, 65)), grid)
    assert np.all(cls == 0) and np.allclose(gap, 0.0)


def test_single_path_detection_and_report_rows():
    grid = TimeGrid(1.0, 64)
    x = np.zeros(65)
    v = np.full(65, 0.16)
    v[:10] = 0.04
    res = detect_change_point(QvDerivativeEstimate(v, 2), DISTINCT, x, grid, run_length=3)
    assert res.switch_index == 10 and res.tau_hat == pytest.approx(10 / 64)
    rows = detection_rows([7], [0.15], [res])
    assert rows[0][0] == 7 and rows[0][-1] == "switch"


def test_detection_error_shrinks_with_resolution():
    errs = {}
    for n in (2**11, 2**13):
        cfg = make_config(DISTINCT, IndependentLaw.uniform(0.2, 0.8), n_steps=n, paths=200, seed=9)
        b, res = _detect(cfg)
        errs[n] = np.median([abs(r.tau_hat - t) if r.detected else 1.0 for r, t in zip(res, b.tau)])
    assert errs[2**13] < errs[2**11]


def test_detector_recovers_the_regime_flag():
    cfg = make_config(DISTINCT, IndependentLaw.uniform(0.2, 0.8), n_steps=4096, paths=200, seed=12)
    b, res = _detect(cfg)
    flags = recovered_regime(res, cfg.grid)
    k_tau = np.floor(b.tau / cfg.grid.dt)
    idx = np.arange(cfg.grid.n_steps + 1)
    outside = np.abs(idx[None, :] - k_tau[:, None]) > 2 * 64
    agree = (flags == b.regime)[outside]
    assert agree.mean() >= 0.99


# --------------------------------------------------------------------------
# normalised drivers


def test_yhat_is_brownian_without_drift():
    cfg = make_config(DISTINCT, Cox(ConstantIntensity(2.0)), n_steps=256, paths=4000, seed=5)
    b = simulate_paths(cfg).bundle
    yhat = build_yhat(b.x, b.v, cfg.grid)
    qv = np.sum(np.diff(yhat, axis=1) ** 2, axis=1)
    assert abs(qv.mean() - 1.0) < 0.02
    assert kstest(yhat[:, -1], "norm").pvalue > 0.05


def test_yhat_and_ybar_for_constant_volatility():
    cfg = make_config(constant_coeffs(0.0, 0.0, 0.3, 0.3), Deterministic(0.5), n_steps=64, paths=10)
    b = simulate_paths(cfg).bundle
    assert np.max(np.abs(build_yhat(b.x, b.v, cfg.grid) - b.x / 0.3)) < 1e-12
    assert np.max(np.abs(build_ybar(b.x, cfg.coefficients, cfg.grid) - b.x / 0.3)) < 1e-12


def test_yhat_rejects_nonpositive_volatility():
    v = np.ones((1, 5))
    v[0, 2] = 0.0
    with pytest.raises(ValueError):
        build_yhat(np.zeros((1, 5)), v)


def test_ybar_needs_identical_volatility():
    with pytest.raises(ScenarioError):
        build_ybar(np.zeros(5), DISTINCT, TimeGrid(1.0, 4))


def _state_dependent_identical():
    sig = BoundedSigmoid(0.15, 0.35, 3.0)
    return RegimeCoefficients(Constant(0.0), Constant(0.0), sig, sig, 1.0)


def test_ybar_quadratic_variation_with_state_dependent_volatility():
    coeffs = _state_dependent_identical()
    cfg = make_config(coeffs, IndependentLaw.exponential(1.0), n_steps=256, paths=10_000, seed=6)
    b = simulate_paths(cfg).bundle
    ybar = build_ybar(b.x, coeffs, cfg.grid)
    qv = np.sum(np.diff(ybar, axis=1) ** 2, axis=1)
    assert abs(qv.mean() - 1.0) < 0.02


def test_price_is_recovered_from_ybar():
    coeffs = _state_dependent_identical()
    cfg = make_config(coeffs, IndependentLaw.exponential(1.0), n_steps=256, paths=50)
    b = simulate_paths(cfg).bundle
    x = reconstruct_from_ybar(build_ybar(b.x, coeffs, cfg.grid), coeffs, cfg.grid)
    assert np.max(np.abs(x - b.x)) < 1e-10


# --------------------------------------------------------------------------
# jump martingale


def test_cox_jump_martingale_is_centred():
    grid = TimeGrid(1.0, 64)
    rng = np.random.default_rng(8)
    u = rng.random(100_000)
    u = u[u > 0]
    w1 = np.zeros((len(u), 65))
    spec = Cox(ConstantIntensity(2.0))
    tau = sample_tau_batch(spec, w1, None, grid, u)
    jm = jump_martingale_for(spec, tau, grid, w1)
    ok, mean, se = within_se(jm.m[:, 32], 0.0)
    assert ok, (mean, se)


def test_uniform_law_jump_martingale_beyond_horizon():
    grid = TimeGrid(1.0, 64)
    spec = IndependentLaw.uniform(0.0, 2.0)
    u = np.random.default_rng(9).random(50_000)
    u = u[u > 0]
    tau = sample_tau_batch(spec, None, None, grid, u)
    jm = jump_martingale_for(spec, tau, grid)
    beyond = np.isinf(tau)
    assert np.allclose(jm.m[beyond, -1], -math.log(2.0), atol=1e-12)
    ok, mean, se = within_se(jm.m[:, -1], 0.0)
    assert ok, (mean, se)


def test_predictable_time_has_no_jump_martingale():
    with pytest.raises(CompensatorUndefinedError):
        jump_martingale_for(Deterministic(0.5), np.array([0.5]), TimeGrid(1.0, 8))


@settings(max_examples=40, deadline=None)
@given(tau=st.floats(0.001, 0.999), rate=st.floats(0.1, 5.0))
def test_jump_martingale_has_one_unit_jump(tau, rate):
    grid = TimeGrid(1.0, 64)
    a = tau_compensator(Cox(ConstantIntensity(rate)), np.array([tau]), grid, np.zeros((1, 65)))
    jm = build_jump_martingale(np.array([tau]), a, grid)
    jumps = np.diff(jm.m[0]) + np.diff(jm.a[0])
    assert np.sum(jumps > 0.5) == 1
    k = int(np.argmax(jumps))
    assert grid.times[k] < tau <= grid.times[k + 1]
    assert np.all(np.diff(jm.a[0]) >= 0)


# --------------------------------------------------------------------------
# adaptedness


def test_estimators_are_adapted():
    cfg = make_config(DISTINCT, IndependentLaw.uniform(0.2, 0.8), n_steps=512, paths=5)
    b = simulate_paths(cfg).bundle
    idx = range(8 * 16, 513, 37)

    def qv(grid, x):
        return realized_qv_derivative(x, grid, 16).v2_hat

    def yhat(grid, x, v):
        return build_yhat(x, v, grid)

    def flags(grid, x):
        res = detect_batch(realized_qv_derivative(x, grid, 16), DISTINCT, x, grid)
        return recovered_regime(res, grid)

    assert audit_adaptedness(qv, cfg.grid, [b.x], idx, atol=1e-12) == []
    assert audit_adaptedness(yhat, cfg.grid, [b.x, b.v], idx, atol=1e-12) == []
    assert audit_adaptedness(flags, cfg.grid, [b.x], idx) == []


def test_audit_catches_lookahead():
    grid = TimeGrid(1.0, 64)
    x = brownian(1, 64, seed=3)

    def centred(grid, x):
        out = np.zeros(x.shape)
        out[..., :-1] = x[..., 1:]
        return out

    assert audit_adaptedness(centred, grid, [x], range(8, 60, 5)) != []
