import math

import numpy as np
import pytest

from chgpt.arbitrage import weighted_terminal_mean
from chgpt.engine import simulate_paths
from chgpt.errors import ArbitrageDetectedError
from chgpt.hedging import (
    BasisSpec,
    ClaimSpec,
    CompletenessRow,
    asset_claim,
    completeness_report,
    constant_claim,
    digital_claim,
    early_switch_claim,
    prepare_hedge_data,
    regress_integrands,
    replicate,
    rmse_ladder,
    subset,
)
from chgpt.model import ConstantIntensity, Cox, FiltrationTag, HittingTime, IndependentLaw

from conftest import constant_coeffs, make_config

IDENTICAL = constant_coeffs(0.0, 0.0, 0.3, 0.3)
DISTINCT = constant_coeffs(0.05, -0.05, 0.2, 0.4)


def _data(coeffs, tau, tag, n_steps=32, paths=4000, seed=1, rho=0.0):
    cfg = make_config(coeffs, tau, n_steps=n_steps, paths=paths, seed=seed, tag=tag, rho=rho)
    return prepare_hedge_data(simulate_paths(cfg))


def _split(data):
    half = len(data) // 2
    return subset(data, slice(0, half)), subset(data, slice(half, None))


# --------------------------------------------------------------------------
# claims and basis


def test_payoff_outside_declared_bound_rejected():
    claim = ClaimSpec(lambda x, s, tau: 2.0 * np.ones(np.shape(x)), 1.0, "two")
    with pytest.raises(ValueError):
        claim(np.zeros(3), np.ones(3), np.full(3, np.inf))


def test_claim_payoffs():
    x = np.array([-1.0, 0.0, 1.0])
    tau = np.array([0.2, 0.5, np.inf])
    assert list(digital_claim()(x, x, tau)) == [0.0, 0.0, 1.0]
    assert list(early_switch_claim(0.5)(x, x, tau)) == [1.0, 1.0, 0.0]
    assert list(constant_claim(2.0)(x, x, tau)) == [2.0] * 3


@pytest.mark.parametrize("size", [0, 1, 2])
def test_small_basis_rejected(size):
    with pytest.raises(ValueError):
        BasisSpec(size)


def test_arbitrage_scenario_has_no_hedge():
    cfg = make_config(IDENTICAL, HittingTime(0.1), n_steps=1024, paths=200, tag=FiltrationTag.G_TAU)
    with pytest.raises(ArbitrageDetectedError):
        prepare_hedge_data(simulate_paths(cfg))


# --------------------------------------------------------------------------
# trivial claims


@pytest.mark.parametrize("tau, tag", [
    (IndependentLaw.exponential(1.0), FiltrationTag.FX),
    (Cox(ConstantIntensity(2.0)), FiltrationTag.GX),
])
def test_constant_claim_is_its_own_hedge(tau, tag):
    data = _data(DISTINCT if tag is FiltrationTag.GX else IDENTICAL, tau, tag, paths=1000)
    hedge = regress_integrands(constant_claim(0.7), data)
    assert hedge.v0 == pytest.approx(0.7, abs=1e-12)
    assert hedge.replication_rmse < 1e-10
    assert np.max(np.abs(hedge.phi)) < 1e-8


def test_asset_claim_recovers_unit_shares():
    data = _data(constant_coeffs(0.05, 0.05, 0.2, 0.2), IndependentLaw.uniform(0.0, 2.0), FiltrationTag.G,
                 paths=40_000)
    train, test = _split(data)
    claim = asset_claim(100.0)
    hedge = regress_integrands(claim, train)
    assert abs(hedge.v0 - 1.0) <= 3 * hedge.v0_se
    interior = hedge.h[:, 1:-1]
    assert np.mean(np.abs(interior - 1.0)) < 0.05
    # the exact hedge h = 1 replicates without error, so the fitted one must come close
    assert replicate(claim, hedge, test).rmse < 0.05


# --------------------------------------------------------------------------
# pricing


def test_driftless_digital_is_priced_at_one_half():
    data = _data(IDENTICAL, IndependentLaw.exponential(1.0), FiltrationTag.FX, n_steps=16, paths=100_000, seed=3)
    hedge = regress_integrands(digital_claim(), data, BasisSpec(4))
    assert abs(hedge.v0 - 0.5) <= 3 * hedge.v0_se


def test_initial_value_matches_deflated_price():
    data = _data(DISTINCT, Cox(ConstantIntensity(2.0)), FiltrationTag.GX, n_steps=64, paths=4000, rho=0.3)
    claim = early_switch_claim(0.5)
    hedge = regress_integrands(claim, data)
    H = claim(data.x[:, -1], data.s[:, -1], data.tau)
    price, se = weighted_terminal_mean(H, data.z[:, -1])
    assert abs(hedge.v0 - price) <= 3 * math.hypot(se, hedge.v0_se)
    assert hedge.v0 == pytest.approx(1.0 - math.exp(-1.0), abs=3 * hedge.v0_se)


def test_initially_enlarged_tag_prices_per_bucket():
    data = _data(DISTINCT, IndependentLaw.uniform(0.0, 2.0), FiltrationTag.GX_TAU, paths=4000)
    claim = early_switch_claim(0.25)
    hedge = regress_integrands(claim, data)
    assert isinstance(hedge.v0, dict)
    edges = hedge.bucket_edges
    assert len(edges) == 9
    lows = np.concatenate([[0.0], edges])
    highs = np.concatenate([edges, [1.0]])
    for b, v in hedge.v0.items():
        if b == len(edges) + 1:
            assert v == pytest.approx(0.0, abs=1e-9)  # beyond the horizon
        elif highs[b] <= 0.25:
            assert v == pytest.approx(1.0, abs=1e-9)
        elif lows[b] > 0.25:
            assert v == pytest.approx(0.0, abs=1e-9)


# --------------------------------------------------------------------------
# replication quality


def test_jump_integrand_is_needed_for_distinct_volatility():
    data = _data(DISTINCT, Cox(ConstantIntensity(2.0)), FiltrationTag.GX, n_steps=64, paths=8000, seed=5, rho=0.3)
    train, test = _split(data)
    claim = digital_claim(FiltrationTag.GX)
    full = replicate(claim, regress_integrands(claim, train), test).rmse
    ablated = replicate(claim, regress_integrands(claim, train, use_psi=False), test).rmse
    assert ablated > full


def test_jump_integrand_changes_little_without_a_jump():
    data = _data(constant_coeffs(0.0, 0.1, 0.3, 0.3), IndependentLaw.exponential(1.0), FiltrationTag.FX,
                 n_steps=64, paths=4000)
    train, test = _split(data)
    claim = digital_claim()
    full = replicate(claim, regress_integrands(claim, train), test).rmse
    ablated = replicate(claim, regress_integrands(claim, train, use_psi=False), test).rmse
    assert abs(ablated / full - 1.0) < 0.10


def test_out_of_sample_error_does_not_grow_with_training_size():
    data = _data(constant_coeffs(0.0, 0.1, 0.3, 0.3), IndependentLaw.exponential(1.0), FiltrationTag.FX,
                 n_steps=64, paths=12_000, seed=7)
    train, test = subset(data, slice(0, 8000)), subset(data, slice(8000, None))
    ladder = rmse_ladder(digital_claim(), train, test, (500, 2000, 8000))
    assert np.all(ladder[1:] <= 1.10 * ladder[:-1])


def test_integrands_are_square_integrable():
    data = _data(DISTINCT, Cox(ConstantIntensity(2.0)), FiltrationTag.GX, paths=1000)
    hedge = regress_integrands(early_switch_claim(0.5), data)
    assert np.all(np.isfinite(hedge.integrability(data.grid)))
    assert hedge.replication_rmse >= 0


# --------------------------------------------------------------------------
# completeness


def test_completeness_report_flags():
    ok = completeness_report([
        CompletenessRow("identical_vol", "digital", True, 0.2, 0.21),
        CompletenessRow("cox_distinct", "early switch 1{tau <= 0.5}", False, 0.1, 0.5),
    ])
    assert ok.passed
    bad = completeness_report([
        CompletenessRow("identical_vol", "digital", True, 0.2, 0.3),
        CompletenessRow("cox_distinct", "early switch 1{tau <= 0.5}", False, 0.1, 0.12),
    ])
    assert len(bad.failures) == 2
    assert CompletenessRow("a", "b", True, 0.0, 0.0).gap == 0.0
