import numpy as np
import pytest

from chgpt.model import (
    Constant,
    CorrelationRho,
    Deterministic,
    FiltrationTag,
    RegimeCoefficients,
    ScenarioConfig,
    TimeGrid,
)


def constant_coeffs(mu1=0.0, mu2=None, s1=0.2, s2=None, K=1.0):
    mu2 = mu1 if mu2 is None else mu2
    s2 = s1 if s2 is None else s2
    return RegimeCoefficients(Constant(mu1), Constant(mu2), Constant(s1), Constant(s2), K)


def make_config(coeffs=None, tau=None, n_steps=64, horizon=1.0, paths=1000, seed=1, rho=0.0,
                tag=FiltrationTag.G, s0=1.0, window=None):
    return ScenarioConfig(
        coefficients=coeffs or constant_coeffs(),
        rho=CorrelationRho(rho),
        tau_spec=tau if tau is not None else Deterministic(5.0),
        grid=TimeGrid(horizon, n_steps),
        s0=s0,
        n_paths=paths,
        master_seed=seed,
        filtration_tag=tag,
        tau_window=window,
    )


def brownian(paths, n_steps, horizon=1.0, seed=0):
    """Brownian paths on a uniform grid, started at 0."""
    rng = np.random.default_rng(seed)
    dw = rng.standard_normal((paths, n_steps)) * np.sqrt(horizon / n_steps)
    w = np.zeros((paths, n_steps + 1))
    np.cumsum(dw, axis=1, out=w[:, 1:])
    return w


def within_se(sample, target, k=3.0):
    sample = np.asarray(sample, dtype=float)
    se = sample.std(ddof=1) / np.sqrt(len(sample))
    return abs(sample.mean() - target) <= k * se, sample.mean(), se


@pytest.fixture
def scenario_dir(tmp_path):
    return tmp_path
