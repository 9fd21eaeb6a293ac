import math

import numpy as np
import pytest

from chgpt.arbitrage import (
    DIVERGING,
    STABLE,
    brownian_part,
    build_deflator,
    deflated_price_test,
    initial_enlargement_drift,
    market_price_of_risk,
    martingale_test,
    na1_statistic,
    shrinkage_consistency,
    tag_brownian,
    weighted_terminal_mean,
)
from chgpt.engine import compose_driver, simulate_paths
from chgpt.errors import ArbitrageDetectedError, PathInconsistencyError, UnsupportedScenarioError
from chgpt.filtration import build_yhat, jump_martingale_for
from chgpt.model import (
    ConstantIntensity,
    Cox,
    FiltrationTag,
    HittingTime,
    IndependentLaw,
    TimeGrid,
)

from conftest import brownian, constant_coeffs, make_config, within_se


def _mpr(cfg, tag=None):
    out = simulate_paths(cfg)
    b = out.bundle
    tag = cfg.filtration_tag if tag is None else tag
    return b, market_price_of_risk(b, cfg.coefficients, tag, cfg.grid, cfg.tau_spec, float(cfg.rho))


# --------------------------------------------------------------------------
# market price of risk


def test_zero_drift_has_zero_price_of_risk():
    cfg = make_config(constant_coeffs(0.0, 0.0, 0.2, 0.4), Cox(ConstantIntensity(2.0)), paths=50)
    _, mpr = _mpr(cfg)
    assert np.all(mpr.lam == 0.0)


def test_price_filtration_with_distinct_volatility():
    cfg = make_config(constant_coeffs(0.1, -0.2, 0.2, 0.4), IndependentLaw.uniform(0.2, 0.8), paths=50,
                      tag=FiltrationTag.FX)
    b, mpr = _mpr(cfg)
    want = np.where(b.regime == 1, -0.2 / 0.4, 0.1 / 0.2)
    assert np.allclose(mpr.lam, want, atol=1e-15)


def test_price_filtration_filters_identical_volatility():
    cfg = make_config(constant_coeffs(0.1, -0.2, 0.2, 0.2), IndependentLaw.uniform(0.0, 1.0), paths=50,
                      tag=FiltrationTag.FX)
    _, mpr = _mpr(cfg)
    # a posterior mixture of the two regime drifts
    assert np.all(mpr.lam <= 0.5 + 1e-12) and np.all(mpr.lam >= -1.0 - 1e-12)
    assert mpr.lam[:, 0] == pytest.approx(0.5)


def test_bridge_drift_arithmetic():
    grid = TimeGrid(1.0, 4)
    spec = HittingTime(1.0)
    w1 = np.array([0.0, 0.5, 0.8, 0.9, 1.0])
    theta = initial_enlargement_drift(1.0, w1, spec, grid)
    # t = 0.75, w = 0.5 would be (1-0.5)/0.25 - 1/0.5 = 0
    assert (1 - 0.5) / 0.25 - 1 / (1 - 0.5) == 0.0
    assert theta[1] == pytest.approx(0.5 / 0.75 - 2.0)
    assert theta[3] == pytest.approx(0.1 / 0.25 - 10.0)
    assert theta[4] == 0.0
    grid10 = TimeGrid(1.0, 10)
    w = np.zeros(11)
    w[9] = 0.8
    th = initial_enlargement_drift(1.0, w, spec, grid10)
    assert th[9] == pytest.approx(-3.0)


def test_bridge_drift_vanishes_for_independent_times():
    grid = TimeGrid(1.0, 8)
    assert np.all(initial_enlargement_drift(0.5, brownian(3, 8), IndependentLaw.uniform(0, 1), grid) == 0.0)


def test_bridge_drift_rejects_inconsistent_path():
    grid = TimeGrid(1.0, 4)
    with pytest.raises(PathInconsistencyError):
        initial_enlargement_drift(1.0, np.array([0.0, 1.2, 0.5, 0.8, 1.0]), HittingTime(1.0), grid)


def test_unsupported_price_filtration_projection():
    coeffs = constant_coeffs(0.1, -0.2, 0.2, 0.2)
    cfg = make_config(coeffs, HittingTime(0.1), paths=10, tag=FiltrationTag.FX)
    b = simulate_paths(cfg).bundle
    with pytest.raises(UnsupportedScenarioError):
        market_price_of_risk(b, coeffs, FiltrationTag.FX, cfg.grid, cfg.tau_spec)


# --------------------------------------------------------------------------
# NA1 surrogate


def test_na1_of_zero_and_constant_price_of_risk():
    grid = TimeGrid(1.0, 1024)
    cfg = make_config(constant_coeffs(0.0, 0.0, 0.2, 0.2), IndependentLaw.uniform(0, 2), n_steps=1024, paths=20)
    _, mpr = _mpr(cfg)
    rep = na1_statistic(mpr, grid)
    assert rep.verdict == STABLE and np.all(rep.ladder == 0.0)
    cfg = make_config(constant_coeffs(0.06, 0.06, 0.2, 0.2), IndependentLaw.uniform(0, 2), n_steps=1024, paths=20)
    _, mpr = _mpr(cfg)
    rep = na1_statistic(mpr, grid)
    c = 0.3
    want = c**2 * (1.0 - rep.epsilons)
    assert rep.verdict == STABLE
    assert np.allclose(rep.ladder, want[None, :], rtol=1e-12)


def test_na1_diverges_for_initially_enlarged_hitting_time():
    cfg = make_config(constant_coeffs(0.0, 0.0, 0.2, 0.2), HittingTime(0.1), n_steps=4096, paths=1000,
                      seed=61, tag=FiltrationTag.G_TAU)
    _, mpr = _mpr(cfg)
    rep = na1_statistic(mpr, cfg.grid)
    assert rep.verdict == DIVERGING
    assert np.all(np.diff(rep.median[-3:]) > 0)
    assert np.all(rep.growth >= 0.25)


# --------------------------------------------------------------------------
# deflators


def test_zero_price_of_risk_gives_unit_deflator():
    grid = TimeGrid(1.0, 16)
    z = build_deflator(np.zeros((3, 17)), brownian(3, 16), grid)
    assert np.all(z.z == 1.0)


def test_constant_price_of_risk_deflator_moments():
    grid = TimeGrid(1.0, 8)
    c = 0.5
    w = brownian(100_000, 8, seed=21)
    z = build_deflator(np.full(w.shape, c), w, grid)
    assert np.all(z.z > 0)
    ok, mean, se = within_se(z.z[:, -1], 1.0)
    assert ok, (mean, se)
    ok, mean, se = within_se(z.log_z[:, -1], -0.5 * c * c)
    assert ok, (mean, se)


def test_deflator_refused_under_diverging_na1():
    cfg = make_config(constant_coeffs(0.0, 0.0, 0.2, 0.2), HittingTime(0.1), n_steps=1024, paths=200,
                      tag=FiltrationTag.G_TAU)
    b, mpr = _mpr(cfg)
    rep = na1_statistic(mpr, cfg.grid)
    assert rep.verdict == DIVERGING
    with pytest.raises(ArbitrageDetectedError):
        build_deflator(mpr, b.w1, cfg.grid, na1=rep)


def test_jump_factor_needs_psi_above_minus_one():
    cfg = make_config(constant_coeffs(0.0, 0.0, 0.2, 0.4), Cox(ConstantIntensity(2.0)), paths=10)
    b = simulate_paths(cfg).bundle
    jm = jump_martingale_for(cfg.tau_spec, b.tau, cfg.grid, b.w1)
    with pytest.raises(ValueError):
        build_deflator(np.zeros(b.x.shape), b.w1, cfg.grid, psi=-1.0, jump=jm)


def test_jump_factor_keeps_unit_expectation():
    cfg = make_config(constant_coeffs(0.0, 0.0, 0.2, 0.4), Cox(ConstantIntensity(2.0)), paths=20_000, n_steps=32)
    b = simulate_paths(cfg).bundle
    jm = jump_martingale_for(cfg.tau_spec, b.tau, cfg.grid, b.w1)
    z = build_deflator(np.zeros(b.x.shape), b.w1, cfg.grid, psi=0.5, jump=jm)
    assert np.all(z.z > 0)
    ok, mean, se = within_se(z.z[:, -1], 1.0)
    assert ok, (mean, se)


# --------------------------------------------------------------------------
# martingale tests


def test_martingale_test_examples():
    grid = TimeGrid(1.0, 64)
    assert martingale_test(np.ones((1000, 65)), grid).verdict
    w = brownian(10_000, 64, seed=31)
    rep = martingale_test(w, grid)
    assert rep.verdict and len(rep.checkpoints) == 5
    drifted = martingale_test(w + 0.5 * grid.times, grid)
    assert not drifted.passed[-1]


def test_martingale_test_preconditions():
    grid = TimeGrid(1.0, 8)
    with pytest.raises(ValueError):
        martingale_test(np.ones((999, 9)), grid)
    with pytest.raises(ValueError):
        martingale_test(np.ones((1000, 9)), grid, checkpoints=[0.5, 1.0])
    with pytest.raises(ValueError):
        martingale_test(np.ones((1000, 9)), grid, checkpoints=[0.0, 0.3, 1.0])


def _deflated(cfg):
    b, mpr = _mpr(cfg)
    yhat = build_yhat(b.x, b.v, cfg.grid)
    d = compose_driver(b.w1, b.w2, b.tau, float(cfg.rho), cfg.grid, b.w1_tau, b.w2_tau)
    z = build_deflator(mpr, tag_brownian(d, mpr, cfg.grid), cfg.grid)
    return b, yhat, z


def test_black_scholes_deflated_price_is_a_martingale():
    cfg = make_config(constant_coeffs(0.05, 0.05, 0.2, 0.2), IndependentLaw.uniform(0, 2), n_steps=64,
                      paths=20_000, seed=11)
    b, _, z = _deflated(cfg)
    rep = deflated_price_test(b.s, z, cfg.grid)
    assert rep.verdict
    assert abs(rep.ez_mean - 1.0) <= 3 * rep.ez_se


def test_drifted_price_without_deflator_fails():
    cfg = make_config(constant_coeffs(0.5, 0.5, 0.2, 0.2), IndependentLaw.uniform(0, 2), paths=10_000)
    b = simulate_paths(cfg).bundle
    rep = deflated_price_test(b.s, np.ones(b.s.shape), cfg.grid)
    assert not rep.verdict


def test_unmatched_paths_rejected():
    grid = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        deflated_price_test(np.ones((1000, 5)), np.ones((1000, 5)), grid, path_ids=np.arange(1000),
                            z_ids=np.arange(1, 1001))


@pytest.mark.parametrize("tau", [IndependentLaw.uniform(0, 1), Cox(ConstantIntensity(2.0))])
def test_supermartingale_and_girsanov(tau):
    cfg = make_config(constant_coeffs(0.1, -0.1, 0.2, 0.4), tau, n_steps=64, paths=20_000, seed=17)
    b, yhat, z = _deflated(cfg)
    zt = z.z[:, -1]
    ok, mean, se = within_se(zt, 1.0)
    assert mean <= 1.0 + 3 * se
    m, se = weighted_terminal_mean(yhat[:, -1], zt)
    assert abs(m) <= 3 * se


def test_enlarged_and_progressive_brownian_parts_coincide_for_independent_times():
    cfg = make_config(constant_coeffs(0.1, -0.1, 0.2, 0.4), IndependentLaw.uniform(0, 1), paths=100,
                      tag=FiltrationTag.G)
    b, mpr_g = _mpr(cfg)
    mpr_t = market_price_of_risk(b, cfg.coefficients, FiltrationTag.G_TAU, cfg.grid, cfg.tau_spec)
    yhat = build_yhat(b.x, b.v, cfg.grid)
    gap = brownian_part(yhat, mpr_g, cfg.grid) - brownian_part(yhat, mpr_t, cfg.grid)
    assert np.max(np.abs(gap)) < 1e-12


def test_driver_and_price_brownian_parts_agree_off_the_switch_step():
    cfg = make_config(constant_coeffs(0.1, -0.1, 0.2, 0.4), IndependentLaw.uniform(0, 1), paths=20, rho=0.3)
    b, mpr = _mpr(cfg)
    d = compose_driver(b.w1, b.w2, b.tau, 0.3, cfg.grid, b.w1_tau, b.w2_tau)
    from_driver = np.diff(tag_brownian(d, mpr, cfg.grid), axis=1)
    from_price = np.diff(brownian_part(build_yhat(b.x, b.v, cfg.grid), mpr, cfg.grid), axis=1)
    k_tau = cfg.grid.index_at_or_before(np.where(np.isfinite(b.tau), b.tau, 0.0))
    off = np.arange(cfg.grid.n_steps)[None, :] != np.where(np.isfinite(b.tau), k_tau, -1)[:, None]
    assert np.allclose(from_driver[off], from_price[off], atol=1e-12)
    assert not np.allclose(from_driver[~off], from_price[~off], atol=1e-6)


# --------------------------------------------------------------------------
# shrinkage


def test_shrinkage_under_immersion():
    cfg = make_config(constant_coeffs(0.05, 0.05, 0.2, 0.2), IndependentLaw.uniform(0, 2), n_steps=256, paths=200)
    b = simulate_paths(cfg).bundle
    rep = shrinkage_consistency(b, cfg.coefficients, cfg.grid, cfg.tau_spec)
    assert rep.checked and rep.passed
    assert rep.verdict_g == STABLE and rep.verdict_gx == STABLE


def test_shrinkage_skips_initial_enlargement():
    cfg = make_config(constant_coeffs(), HittingTime(0.1), paths=10)
    b = simulate_paths(cfg).bundle
    rep = shrinkage_consistency(b, cfg.coefficients, cfg.grid, cfg.tau_spec, FiltrationTag.G_TAU)
    assert not rep.checked and rep.notice
    assert math.isfinite(len(rep.violations))
