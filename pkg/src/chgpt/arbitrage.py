"""Market price of risk per filtration, the NA1 integrability surrogate, deflators
and Monte Carlo martingale tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ArbitrageDetectedError, PathInconsistencyError, UnsupportedScenarioError
from .model import (
    ConstantIntensity,
    Cox,
    Deterministic,
    FiltrationTag,
    HittingTime,
    IndependentLaw,
    ProbeLattice,
    evaluate,
    identical_volatility,
)

STABLE = "stable"
DIVERGING = "diverging"
INCONCLUSIVE = "inconclusive"
DEFAULT_LADDER = tuple(2.0**-j for j in range(3, 10))
MIN_TEST_PATHS = 1000


def _independent(spec):
    """Change points independent of the drivers (constant-intensity Cox included)."""
    return isinstance(spec, (IndependentLaw, Deterministic)) or (
        isinstance(spec, Cox) and isinstance(spec.intensity, ConstantIntensity)
    )


def _same_drift(coeffs):
    tt, xx = ProbeLattice().mesh()
    return bool(np.array_equal(evaluate(coeffs.mu1, tt, xx), evaluate(coeffs.mu2, tt, xx)))


def pairwise_mean(a, axis=0):
    """Mean along ``axis`` with numpy's pairwise summation on a contiguous copy."""
    a = np.moveaxis(np.asarray(a, dtype=float), axis, -1)
    a = np.ascontiguousarray(a)
    return np.sum(a, axis=-1) / a.shape[-1]


# --------------------------------------------------------------------------
# market price of risk


@dataclass
class MarketPriceOfRisk:
    """``lam`` over the grid per path; NaN marks nodes where it is undefined.

    ``blowup`` is the time at which ``lam`` may cease to be square integrable
    (the change point for initially enlarged hitting scenarios, ``inf`` otherwise).
    """

    lam: np.ndarray
    filtration_tag: FiltrationTag
    blowup: np.ndarray
    theta: np.ndarray | None = None
    physical: np.ndarray | None = None  # μ_regime / V, the price of risk seen with the drivers


def initial_enlargement_drift(tau, w1, spec, grid):
    """Drift of ``W¹`` once its first passage time of ``a`` is known from the start.

    ``θ[k] = (a - w_k)/(tau - t_k) - 1/(a - w_k)`` before ``tau`` and 0 from it on.
    Independent change points carry no information about the driver: ``θ ≡ 0``.
    """
    w1 = np.asarray(w1, dtype=float)
    if not isinstance(spec, HittingTime):
        if _independent(spec):
            return np.zeros(w1.shape)
        raise UnsupportedScenarioError(f"no analytic information drift for {type(spec).__name__}")
    a = spec.level
    tau = np.asarray(tau, dtype=float)
    t = grid.times
    before = t < (tau[..., None] if tau.ndim else tau)
    gap = a - w1
    if np.any(before & (gap <= 0)):
        raise PathInconsistencyError("driver reached the hitting level before the recorded change point")
    with np.errstate(divide="ignore", invalid="ignore"):
        remaining = (tau[..., None] if tau.ndim else tau) - t
        theta = np.where(before, gap / remaining - 1.0 / gap, 0.0)
    return theta


def _bayes_filter(bundle, coeffs, spec, grid):
    """Posterior probability that the switch has happened, from the price alone.

    Identical volatility: the second regime only shows through its drift, so
    ``π_k = P(tau < t_k | price up to t_k)`` follows a discrete Wonham filter
    with Gaussian likelihoods of the normalised increments.
    """
    t = grid.times
    dt = np.diff(t)
    x = bundle.x
    P, n1 = x.shape
    F = np.asarray(spec.cdf(t), dtype=float) if isinstance(spec, IndependentLaw) else -np.expm1(
        -spec.intensity.rate * t
    )
    surv = 1.0 - F[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(surv > 0, np.diff(F) / surv, 1.0)
    pi = np.zeros((P, n1))
    for k in range(n1 - 1):
        sig = evaluate(coeffs.sigma1, t[k], x[:, k])
        h1 = evaluate(coeffs.mu1, t[k], x[:, k]) / sig
        h2 = evaluate(coeffs.mu2, t[k], x[:, k]) / sig
        dy = (x[:, k + 1] - x[:, k]) / sig
        # likelihood ratio of the second regime over the first for N(h dt, dt)
        log_lr = (h2 - h1) * dy - 0.5 * (h2 * h2 - h1 * h1) * dt[k]
        p = pi[:, k]
        lr = np.exp(np.clip(log_lr, -700, 700))
        post = p * lr / (p * lr + (1.0 - p))
        pi[:, k + 1] = post + (1.0 - post) * q[k]
    return pi


def market_price_of_risk(bundle, coeffs, tag, grid, tau_spec, rho=0.0):
    """Drift over volatility in the decomposition seen by ``tag``.

    Supported cases, all with analytically known information drift:

    * ``G``/``GX``: immersion (independent or Cox change points) and stopping
      times of the drivers (hitting, deterministic) add no drift, so
      ``lam = μ_regime / V``.
    * ``FX`` with distinct volatilities: the change point is a stopping time
      of the price filtration, same answer.  With identical volatilities the
      regime is filtered (independent laws and deterministic times only).
    * ``G_tau``/``GX_tau``: independent change points add nothing; a hitting
      time adds the bridge drift before the change point.  The driver before
      the change point is recoverable from the price, so both tags agree.
    """
    tag = FiltrationTag(tag)
    t = grid.times
    x = bundle.x
    tau = bundle.tau
    after = t[None, :] > tau[:, None]
    mu = coeffs.drift(t, x, after)
    v = bundle.v
    blowup = np.full(len(tau), np.inf)
    theta = None
    if tag in (FiltrationTag.G, FiltrationTag.GX):
        lam = mu / v
    elif tag is FiltrationTag.FX:
        if not identical_volatility(coeffs) or _same_drift(coeffs):
            lam = mu / v
        elif isinstance(tau_spec, Deterministic):
            lam = mu / v
        elif isinstance(tau_spec, IndependentLaw) or (
            isinstance(tau_spec, Cox) and isinstance(tau_spec.intensity, ConstantIntensity)
        ):
            pi = _bayes_filter(bundle, coeffs, tau_spec, grid)
            m1 = evaluate(coeffs.mu1, t, x)
            m2 = evaluate(coeffs.mu2, t, x)
            lam = (pi * m2 + (1.0 - pi) * m1) / v
        else:
            raise UnsupportedScenarioError(
                "price-filtration drift needs a projection that is not available for this change point"
            )
    else:
        if isinstance(tau_spec, HittingTime):
            known = np.isfinite(tau)
            theta = np.full(x.shape, np.nan)
            theta[known] = initial_enlargement_drift(tau[known], bundle.w1[known], tau_spec, grid)
            lam = mu / v + theta
            blowup = np.where(known, tau, np.nan)
        elif _independent(tau_spec):
            theta = np.zeros(x.shape)
            lam = mu / v
        else:
            raise UnsupportedScenarioError("initially enlarged drift is only known for hitting or independent times")
    return MarketPriceOfRisk(lam, tag, blowup, theta, mu / v)


# --------------------------------------------------------------------------
# NA1 surrogate


@dataclass
class Na1Report:
    epsilons: np.ndarray  # truncations, largest first
    ladder: np.ndarray  # (n_paths, n_rungs) values of ∫ lam² dt up to min(blowup, T) - eps
    verdict: str
    median: np.ndarray
    growth: np.ndarray  # median growth per halving on the last rungs
    stable_fraction: float
    undefined_paths: int = 0

    @property
    def statistic(self):
        """The least truncated rung, standing in for ``∫₀ᵀ lam² dt``."""
        return self.ladder[:, -1]


def _truncated_integrals(sq, grid, upper):
    """Trapezoid of each row of ``sq`` over ``[0, upper_i]`` with a partial last cell."""
    t = grid.times
    cum = np.zeros(sq.shape)
    np.cumsum(0.5 * (sq[:, 1:] + sq[:, :-1]) * np.diff(t), axis=1, out=cum[:, 1:])
    up = np.clip(upper, 0.0, grid.horizon)
    k = np.minimum(grid.index_at_or_before(up), grid.n_steps - 1)
    rows = np.arange(sq.shape[0])
    h = up - t[k]
    f0 = sq[rows, k]
    f1 = sq[rows, k + 1]
    cell = t[k + 1] - t[k]
    # trapezoid of the linear interpolant on [t_k, up]
    f_up = f0 + (f1 - f0) * h / cell
    out = cum[rows, k] + 0.5 * (f0 + f_up) * h
    return np.where(upper > 0, out, 0.0)


def classify_ladder(ladder, stable_tol=0.05, stable_share=0.9, growth_tol=0.25, last=3):
    """Verdict from the last ``last`` rungs of a per-path ladder."""
    tail = ladder[:, -last:]
    hi = np.max(tail, axis=1)
    lo = np.min(tail, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        spread = np.where(hi > 0, (hi - lo) / hi, 0.0)
    stable_fraction = float(np.mean(spread < stable_tol)) if len(tail) else 1.0
    med = np.median(tail, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = np.where(med[:-1] > 0, med[1:] / med[:-1] - 1.0, np.where(med[1:] > 0, np.inf, 0.0))
    if stable_fraction >= stable_share:
        verdict = STABLE
    elif np.all(growth > growth_tol):
        verdict = DIVERGING
    else:
        verdict = INCONCLUSIVE
    return verdict, growth, stable_fraction


def na1_statistic(mpr, grid, ladder=DEFAULT_LADDER):
    """Integrated squared market price of risk on a ladder of truncations.

    ``I(eps) = ∫₀^{min(blowup, T) - eps} lam² dt``.  The verdict is a finite
    sample surrogate for almost sure finiteness; the raw ladder is kept.
    """
    eps = np.sort(np.asarray(ladder, dtype=float))[::-1] * grid.horizon
    lam = np.asarray(mpr.lam, dtype=float)
    blowup = np.asarray(mpr.blowup, dtype=float)
    defined = ~np.isnan(blowup)
    end = np.minimum(np.where(defined, blowup, 0.0), grid.horizon)
    sq = np.where(np.isfinite(lam), lam, 0.0) ** 2
    sq = sq[defined]
    rungs = np.stack([_truncated_integrals(sq, grid, end[defined] - e) for e in eps], axis=1)
    verdict, growth, frac = classify_ladder(rungs)
    med = np.median(rungs, axis=0) if len(rungs) else np.zeros(len(eps))
    return Na1Report(eps, rungs, verdict, med, growth, frac, int(np.sum(~defined)))


# --------------------------------------------------------------------------
# deflators


@dataclass
class DeflatorPath:
    z: np.ndarray
    log_z: np.ndarray


def brownian_part(yhat, mpr, grid):
    """``B = Ŷ - ∫ lam dt`` (left-point sums): the Brownian motion of the tag's decomposition."""
    lam = np.asarray(mpr.lam if isinstance(mpr, MarketPriceOfRisk) else mpr, dtype=float)
    out = np.array(yhat, dtype=float, copy=True)
    drift = np.zeros(out.shape)
    np.cumsum(lam[..., :-1] * np.diff(grid.times), axis=-1, out=drift[..., 1:])
    return out - drift


def tag_brownian(driver, mpr, grid):
    """``B = W̃ - ∫ (lam - μ/V) dt``: the tag's Brownian motion built from the drivers.

    Off the step holding the change point this equals :func:`brownian_part`;
    on that step the price increment mixes both regimes while ``W̃`` stays
    an exact Brownian increment, so the deflator keeps unit expectation.
    """
    w = np.asarray(getattr(driver, "w_tilde", driver), dtype=float)
    extra = np.nan_to_num(np.asarray(mpr.lam, dtype=float) - mpr.physical, nan=0.0)
    drift = np.zeros(w.shape)
    np.cumsum(extra[..., :-1] * np.diff(grid.times), axis=-1, out=drift[..., 1:])
    return w - drift


def build_deflator(lam, driver, grid, na1=None, psi=None, jump=None):
    """Log-scheme ``log z_{k+1} = log z_k - lam_k ΔW_k - ½ lam_k² Δt``.

    ``driver`` is a :class:`~chgpt.engine.ComposedDriver` or an array of
    driver values.  With ``psi`` and a jump martingale, the factor
    ``exp(-psi A_t) (1 + psi)^{1{tau <= t}}`` is appended.
    """
    if na1 is not None and na1.verdict == DIVERGING:
        raise ArbitrageDetectedError("market price of risk is not square integrable: no deflator")
    lam = np.asarray(lam.lam if isinstance(lam, MarketPriceOfRisk) else lam, dtype=float)
    w = np.asarray(getattr(driver, "w_tilde", driver), dtype=float)
    dt = np.diff(grid.times)
    inc = -lam[..., :-1] * np.diff(w, axis=-1) - 0.5 * lam[..., :-1] ** 2 * dt
    log_z = np.zeros(w.shape)
    np.cumsum(inc, axis=-1, out=log_z[..., 1:])
    if psi is not None and jump is not None:
        if not psi > -1.0:
            raise ValueError("psi must exceed -1 to keep the deflator positive")
        jumped = (jump.m + jump.a) > 0.5
        log_z = log_z - psi * jump.a + math.log1p(psi) * jumped
    return DeflatorPath(np.exp(log_z), log_z)


# --------------------------------------------------------------------------
# martingale tests


@dataclass
class MartingaleTestReport:
    checkpoints: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    passed: np.ndarray
    start: float
    confidence: float
    n_paths: int

    @property
    def verdict(self):
        return bool(np.all(self.passed))

    def rows(self):
        return [
            {"t": float(t), "mean": float(m), "se": float(s), "pass": bool(p)}
            for t, m, s, p in zip(self.checkpoints, self.means, self.std_errors, self.passed)
        ]


def checkpoint_indices(grid, checkpoints):
    t = grid.times
    idx = []
    for c in checkpoints:
        k = int(np.argmin(np.abs(t - c)))
        if abs(t[k] - c) > 1e-9 * max(1.0, grid.horizon):
            raise ValueError(f"checkpoint {c} is not a grid node")
        idx.append(k)
    if 0 not in idx or grid.n_steps not in idx:
        raise ValueError("checkpoints must include 0 and the horizon")
    return np.array(idx)


def default_checkpoints(grid, count=5):
    t = grid.times
    return t[np.linspace(0, grid.n_steps, count).round().astype(int)]


def martingale_test(paths, grid, checkpoints=None, confidence=0.99):
    """Test ``|mean(Y_t) - Y_0| <= z* SE`` at every checkpoint."""
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    P = paths.shape[0]
    if P < MIN_TEST_PATHS:
        raise ValueError(f"martingale test needs at least {MIN_TEST_PATHS} paths, got {P}")
    checkpoints = default_checkpoints(grid) if checkpoints is None else np.asarray(checkpoints, dtype=float)
    idx = checkpoint_indices(grid, checkpoints)
    cols = paths[:, idx]
    means = pairwise_mean(cols, axis=0)
    var = pairwise_mean((cols - means) ** 2, axis=0) * P / (P - 1)
    se = np.sqrt(var / P)
    start = float(pairwise_mean(paths[:, 0]))
    zstar = float(norm.ppf(0.5 + 0.5 * confidence))
    passed = np.abs(means - start) <= zstar * se
    return MartingaleTestReport(grid.times[idx], means, se, passed, start, confidence, P)


@dataclass
class DeflatedPriceReport:
    test: MartingaleTestReport
    ez_mean: float
    ez_se: float
    ez_ci: tuple

    @property
    def verdict(self):
        return self.test.verdict and self.ez_ci[0] <= 1.0 <= self.ez_ci[1]


def terminal_mean(values, confidence=0.99):
    v = np.asarray(values, dtype=float)
    m = float(pairwise_mean(v))
    se = float(math.sqrt(pairwise_mean((v - m) ** 2) / (len(v) - 1)))
    zstar = float(norm.ppf(0.5 + 0.5 * confidence))
    return m, se, (m - zstar * se, m + zstar * se)


def deflated_price_test(s, z, grid, checkpoints=None, confidence=0.99, path_ids=None, z_ids=None):
    """Martingale test of ``S·Z`` plus a confidence interval for ``E[Z_T]``."""
    if path_ids is not None and z_ids is not None and not np.array_equal(path_ids, z_ids):
        raise ValueError("price and deflator paths are not matched")
    z = np.asarray(getattr(z, "z", z), dtype=float)
    test = martingale_test(np.asarray(s) * z, grid, checkpoints, confidence)
    m, se, ci = terminal_mean(z[:, -1], confidence)
    return DeflatedPriceReport(test, m, se, ci)


def weighted_terminal_mean(values, weights):
    """Self-normalised weighted mean and its delta-method standard error."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    wbar = pairwise_mean(w)
    m = float(pairwise_mean(w * v) / wbar)
    se = float(math.sqrt(pairwise_mean((w * (v - m)) ** 2) / len(v)) / wbar)
    return m, se


# --------------------------------------------------------------------------
# shrinkage


@dataclass
class ShrinkageReport:
    checked: bool
    notice: str = ""
    violations: list = field(default_factory=list)
    verdict_g: str | None = None
    verdict_gx: str | None = None

    @property
    def passed(self):
        return not self.violations


def per_path_stable(report, tol=0.05, last=3):
    tail = report.ladder[:, -last:]
    hi = np.max(tail, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        spread = np.where(hi > 0, (hi - np.min(tail, axis=1)) / hi, 0.0)
    return spread < tol


def shrinkage_consistency(bundle, coeffs, grid, tau_spec, scenario_tag=FiltrationTag.G):
    """Check that NA1 in the large filtration carries over to the price-driven one."""
    if FiltrationTag(scenario_tag) in (FiltrationTag.G_TAU, FiltrationTag.GX_TAU):
        return ShrinkageReport(False, "initially enlarged scenario: outside the G versus GX comparison")
    rep_g = na1_statistic(market_price_of_risk(bundle, coeffs, FiltrationTag.G, grid, tau_spec), grid)
    rep_gx = na1_statistic(market_price_of_risk(bundle, coeffs, FiltrationTag.GX, grid, tau_spec), grid)
    sg, sgx = per_path_stable(rep_g), per_path_stable(rep_gx)
    bad = [int(p) for p in bundle.path_ids[sg & ~sgx]]
    if rep_g.verdict == STABLE and rep_gx.verdict != STABLE:
        bad.append(-1)
    return ShrinkageReport(True, "", bad, rep_g.verdict, rep_gx.verdict)
