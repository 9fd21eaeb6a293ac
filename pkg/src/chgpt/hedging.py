"""Representation integrands by backward least-squares regression, and replication.

The claim value ``L`` is rolled back one step at a time under the deflated
measure (local importance weights ``z_{k+1}/z_k``).  The Brownian integrand
comes from regressing ``ΔL·ΔŶ``.  When the change point is observable and
compensable, the jump integrand is the size of the value jump at a switch:
the fitted post-switch value at the next node, with the switch dated there,
minus the fitted pre-switch value, regressed on the current state.  Switches
are rare per step, so this is far less noisy than regressing ``ΔL·ΔM``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .arbitrage import (
    DIVERGING,
    build_deflator,
    market_price_of_risk,
    na1_statistic,
    pairwise_mean,
    tag_brownian,
)
from .engine import compose_driver
from .errors import ArbitrageDetectedError, CompensatorUndefinedError
from .filtration import build_yhat, jump_martingale_for
from .model import Cox, FiltrationTag, IndependentLaw

N_BUCKETS = 10


@dataclass(frozen=True)
class ClaimSpec:
    """Bounded payoff ``payoff(x_T, s_T, tau)``; ``tau`` is ``inf`` without a switch."""

    payoff: Callable
    bound: float
    description: str = ""
    tag: FiltrationTag = FiltrationTag.GX

    def __call__(self, x_T, s_T, tau):
        h = np.asarray(self.payoff(x_T, s_T, tau), dtype=float)
        h = np.broadcast_to(h, np.shape(x_T)).astype(float)
        if np.any(h < 0) or np.any(h > self.bound + 1e-12):
            raise ValueError(f"payoff of {self.description!r} leaves [0, {self.bound}]")
        return h


@dataclass(frozen=True)
class _Digital:
    def __call__(self, x, s, tau):
        return (np.asarray(x) > 0).astype(float)


@dataclass(frozen=True)
class _EarlySwitch:
    cutoff: float

    def __call__(self, x, s, tau):
        return (np.asarray(tau) <= self.cutoff).astype(float)


@dataclass(frozen=True)
class _Asset:
    def __call__(self, x, s, tau):
        return np.asarray(s, dtype=float)


@dataclass(frozen=True)
class _Const:
    value: float

    def __call__(self, x, s, tau):
        return np.full(np.shape(x), float(self.value))


def digital_claim(tag=FiltrationTag.FX):
    return ClaimSpec(_Digital(), 1.0, "digital 1{X_T > 0}", FiltrationTag(tag))


def early_switch_claim(cutoff, tag=FiltrationTag.GX):
    return ClaimSpec(_EarlySwitch(cutoff), 1.0, f"early switch 1{{tau <= {cutoff!r}}}", FiltrationTag(tag))


def asset_claim(bound, tag=FiltrationTag.GX):
    """The asset itself, capped only by the declared bound on simulated prices."""
    return ClaimSpec(_Asset(), bound, "asset S_T", FiltrationTag(tag))


def constant_claim(value, tag=FiltrationTag.GX):
    return ClaimSpec(_Const(value), float(value), f"constant {value!r}", FiltrationTag(tag))


CLAIMS = {
    "digital": lambda p, tag: digital_claim(tag),
    "early_switch": lambda p, tag: early_switch_claim(float(p.get("cutoff", 0.5)), tag),
    "asset": lambda p, tag: asset_claim(float(p.get("bound", 1e6)), tag),
    "constant": lambda p, tag: constant_claim(float(p.get("value", 1.0)), tag),
}


# --------------------------------------------------------------------------
# hedge inputs


@dataclass
class HedgeData:
    """Everything the regression reads, per path and per node."""

    x: np.ndarray
    s: np.ndarray
    v: np.ndarray
    regime: np.ndarray
    tau: np.ndarray
    yhat: np.ndarray
    z: np.ndarray
    m: np.ndarray | None
    grid: object
    tag: FiltrationTag
    path_ids: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def prepare_hedge_data(output, tag=None, na1_check=True):
    """Build regression inputs from a simulation under the tag's deflated measure."""
    cfg = output.config
    tag = FiltrationTag(tag or cfg.filtration_tag)
    b, grid = output.bundle, output.grid
    coeffs = cfg.coefficients
    mpr = market_price_of_risk(b, coeffs, tag, grid, cfg.tau_spec, cfg.rho.rho)
    if na1_check:
        report = na1_statistic(mpr, grid)
        if report.verdict == DIVERGING:
            raise ArbitrageDetectedError("scenario fails NA1 in this filtration: nothing to price under")
    yhat = build_yhat(b.x, b.v, grid)
    lam = np.nan_to_num(mpr.lam, nan=0.0)
    driver = compose_driver(b.w1, b.w2, b.tau, cfg.rho.rho, grid, b.w1_tau, b.w2_tau)
    z = build_deflator(lam, tag_brownian(driver, mpr, grid), grid).z
    m = None
    # a rejection window changes the law of the change point, so the model
    # compensator no longer applies
    compensable = isinstance(cfg.tau_spec, (Cox, IndependentLaw)) and cfg.tau_window is None
    if tag in (FiltrationTag.G, FiltrationTag.GX) and compensable:
        try:
            m = jump_martingale_for(cfg.tau_spec, b.tau, grid, b.w1, b.x).m
        except CompensatorUndefinedError:
            m = None
    return HedgeData(b.x, b.s, b.v, b.regime, b.tau, yhat, z, m, grid, tag, b.path_ids)


# --------------------------------------------------------------------------
# regression


def _poly(x, size):
    return np.stack([x**j for j in range(size)], axis=-1)


def _hats(x, knots):
    """Piecewise-linear interpolation basis on ``knots``, flat beyond the ends."""
    x = np.clip(x, knots[0], knots[-1])
    j = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, len(knots) - 2)
    w = (x - knots[j]) / (knots[j + 1] - knots[j])
    out = np.zeros((len(x), len(knots)))
    rows = np.arange(len(x))
    out[rows, j] = 1.0 - w
    out[rows, j + 1] += w
    return out


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis in the state ``x``.

    ``kind="poly"`` uses monomials up to degree ``size - 1`` of the
    standardised state; ``kind="hat"`` uses ``size`` piecewise-linear hats
    on empirical quantiles.  Where the change point is observed, the
    post-switch part is further crossed with ``tau_cells`` uniform cells of
    ``[0, T]`` holding the switch time.
    """

    size: int = 4
    kind: str = "poly"
    tau_cells: int = 10

    def __post_init__(self):
        if self.size < 3:
            raise ValueError("basis must have at least 3 functions")
        if self.kind not in ("poly", "hat"):
            raise ValueError(f"unknown basis kind {self.kind!r}")


@dataclass
class _StepFit:
    center: float
    scale: float
    knots: np.ndarray | None
    beta_l: np.ndarray
    beta_phi: np.ndarray
    beta_psi: np.ndarray | None
    cell_counts: np.ndarray | None = None  # switched paths per switch-time cell


@dataclass
class HedgeResult:
    """Fitted integrands; ``v0`` is a float, or a per-bucket table for the initially enlarged tag."""

    v0: object
    phi: np.ndarray  # (n_paths, n_steps) integrand against Ŷ
    h: np.ndarray  # shares of the asset, phi / (S V)
    psi: np.ndarray | None
    replication_rmse: float
    n_paths: int
    n_steps: int
    tag: FiltrationTag
    basis: BasisSpec
    use_psi: bool
    bucket_edges: np.ndarray | None = None
    fits: list = field(default_factory=list, repr=False)
    v0_se: float = float("nan")

    def integrability(self, grid):
        """``∫ φ² dt`` per path; finite on every path for a valid hedge."""
        return np.sum(self.phi**2 * np.diff(grid.times), axis=1)


def _buckets(tau, edges):
    """Bucket of each change point; beyond-horizon paths get their own last bucket."""
    b = np.searchsorted(edges, tau, side="right")
    return np.where(np.isfinite(tau), b, len(edges) + 1)


def _onehot(idx, width):
    out = np.zeros((len(idx), width))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def _cross(a, b):
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


def _fit_state(x, basis):
    center = float(pairwise_mean(x))
    scale = float(np.std(x)) or 1.0
    knots = None
    if basis.kind == "hat":
        knots = np.unique(np.quantile(x, np.linspace(0.0, 1.0, basis.size)))
        if len(knots) < 2:
            knots = np.array([center - 1.0, center + 1.0])
    return center, scale, knots


def _design(data, k, basis, center, scale, knots, edges, regime=None, tau=None):
    """Design matrix at node ``k``; ``regime`` and ``tau`` override the path values."""
    x = data.x[:, k]
    r = (data.regime[:, k] if regime is None else np.broadcast_to(regime, x.shape)).astype(float)
    tau = data.tau if tau is None else np.broadcast_to(tau, x.shape)
    base = _poly((x - center) / scale, basis.size) if knots is None else _hats(x, knots)
    if data.tag is FiltrationTag.FX:
        return base
    if data.tag is FiltrationTag.GX_TAU:
        cols = np.concatenate([base * (1.0 - r)[:, None], base * r[:, None]], axis=1)
        return _cross(cols, _onehot(_buckets(tau, edges), len(edges) + 2))
    # progressive tags: the switch time is known once it has happened
    cells = _cell(np.where(r > 0, tau, 0.0), data.grid.times[-1], basis.tau_cells)
    post = _cross(base * r[:, None], _onehot(cells, basis.tau_cells))
    return np.concatenate([base * (1.0 - r)[:, None], post], axis=1)


def _cell(tau, horizon, cells):
    return np.minimum((np.asarray(tau) / horizon * cells).astype(int), cells - 1)


def _cell_counts(data, k, basis):
    r = data.regime[:, k] > 0
    return np.bincount(_cell(data.tau[r], data.grid.times[-1], basis.tau_cells), minlength=basis.tau_cells)


def _jump_size(claim, data, k, basis, nxt, edges):
    """Post-switch minus pre-switch value at node ``k + 1``, switch dated at ``t_{k+1}``.

    A switch-time cell that has just opened holds too few switched paths to
    fit, so the switch is dated in the latest cell with enough of them; with
    none the jump is taken as zero.
    """
    t1 = data.grid.times[k + 1]
    x, s = data.x[:, k + 1], data.s[:, k + 1]
    if nxt is None:
        return claim(x, s, np.full(x.shape, t1)) - claim(x, s, np.full(x.shape, np.inf))
    horizon = data.grid.times[-1]
    ok = np.flatnonzero(nxt.cell_counts[: _cell(t1, horizon, basis.tau_cells) + 1] >= 2 * basis.size)
    if ok.size == 0:
        return np.zeros(x.shape)
    dated = min(t1, (ok[-1] + 0.5) * horizon / basis.tau_cells)
    args = (k + 1, basis, nxt.center, nxt.scale, nxt.knots, edges)
    post = _design(data, *args, regime=1, tau=dated) @ nxt.beta_l
    pre = _design(data, *args, regime=0) @ nxt.beta_l
    return post - pre


def _wls(design, target, sw):
    beta, *_ = np.linalg.lstsq(design * sw[:, None], target * sw, rcond=None)
    return beta


def regress_integrands(claim, data, basis=None, use_psi=True, na1=None):
    """Backward induction of the claim value and its representation integrands.

    ``basis`` is a :class:`BasisSpec` or an integer basis size.
    """
    basis = BasisSpec(basis) if isinstance(basis, int) else (basis or BasisSpec())
    if na1 is not None and na1.verdict == DIVERGING:
        raise ArbitrageDetectedError("scenario fails NA1: no deflated measure to hedge under")
    grid = data.grid
    P, n1 = data.x.shape
    n = n1 - 1
    dt = np.diff(grid.times)
    H = claim(data.x[:, -1], data.s[:, -1], data.tau)
    with_psi = use_psi and data.m is not None
    edges = None
    if data.tag is FiltrationTag.GX_TAU:
        finite = data.tau[np.isfinite(data.tau)]
        edges = np.quantile(finite, np.linspace(0, 1, N_BUCKETS + 1)[1:-1]) if finite.size else np.array([])
    L = H.copy()
    phi = np.zeros((P, n))
    psi = np.zeros((P, n)) if with_psi else None
    fits = [None] * n
    for k in range(n - 1, -1, -1):
        sw = np.sqrt(data.z[:, k + 1] / data.z[:, k])
        center, scale, knots = _fit_state(data.x[:, k], basis)
        D = _design(data, k, basis, center, scale, knots, edges)
        beta_l = _wls(D, L, sw)
        Lk = D @ beta_l
        dL = L - Lk
        dy = data.yhat[:, k + 1] - data.yhat[:, k]
        beta_phi = _wls(D, dL * dy, sw)
        phi[:, k] = (D @ beta_phi) / dt[k]
        beta_psi = None
        if with_psi:
            jump = _jump_size(claim, data, k, basis, fits[k + 1] if k + 1 < n else None, edges)
            beta_psi = _wls(D, jump, sw)
            psi[:, k] = (D @ beta_psi) * (data.regime[:, k] == 0)
        counts = _cell_counts(data, k, basis) if with_psi else None
        fits[k] = _StepFit(center, scale, knots, beta_l, beta_phi, beta_psi, counts)
        L = Lk
    h = phi / (data.s[:, :-1] * data.v[:, :-1])
    if edges is None:
        v0 = float(pairwise_mean(L))
        v0_se = float(math.sqrt(pairwise_mean((H - pairwise_mean(H)) ** 2) / P))
    else:
        b = _buckets(data.tau, edges)
        v0 = {int(i): float(pairwise_mean(L[b == i])) for i in np.unique(b)}
        v0_se = float("nan")
    res = HedgeResult(v0, phi, h, psi, float("nan"), P, n, data.tag, basis, with_psi, edges, fits, v0_se)
    res.replication_rmse = replicate(claim, res, data, in_sample=True).rmse
    return res


def _initial_values(hedge, data):
    if isinstance(hedge.v0, dict):
        b = _buckets(data.tau, hedge.bucket_edges)
        return np.array([hedge.v0.get(int(i), np.nan) for i in b])
    return np.full(len(data), hedge.v0)


def evaluate_integrands(hedge, data):
    """Apply the fitted per-step regressions to (possibly new) paths."""
    P, n1 = data.x.shape
    n = n1 - 1
    if n != hedge.n_steps:
        raise ValueError("hedge and paths use different grids")
    dt = np.diff(data.grid.times)
    phi = np.zeros((P, n))
    psi = np.zeros((P, n)) if hedge.use_psi else None
    for k, f in enumerate(hedge.fits):
        D = _design(data, k, hedge.basis, f.center, f.scale, f.knots, hedge.bucket_edges)
        phi[:, k] = (D @ f.beta_phi) / dt[k]
        if psi is not None:
            psi[:, k] = (D @ f.beta_psi) * (data.regime[:, k] == 0)
    h = phi / (data.s[:, :-1] * data.v[:, :-1])
    return h, psi


@dataclass
class ReplicationReport:
    rmse: float
    in_sample: bool
    n_paths: int
    wealth: np.ndarray = field(repr=False)
    error: np.ndarray = field(repr=False)


def replicate(claim, hedge, data, in_sample=False):
    """Terminal wealth ``v0 + Σ h_k ΔS_k (+ Σ ψ_k ΔM_k)`` against the payoff.

    Pass ``in_sample=True`` when ``data`` is the regression sample; the
    report is then labelled as such.
    """
    if in_sample:
        h, psi = hedge.h, hedge.psi
    else:
        h, psi = evaluate_integrands(hedge, data)
    H = claim(data.x[:, -1], data.s[:, -1], data.tau)
    wealth = _initial_values(hedge, data) + np.sum(h * np.diff(data.s, axis=1), axis=1)
    if psi is not None and data.m is not None:
        wealth = wealth + np.sum(psi * np.diff(data.m, axis=1), axis=1)
    err = H - wealth
    rmse = float(math.sqrt(pairwise_mean(err**2)))
    return ReplicationReport(rmse, in_sample, len(data), wealth, err)


def subset(data, idx):
    return HedgeData(
        data.x[idx], data.s[idx], data.v[idx], data.regime[idx], data.tau[idx], data.yhat[idx],
        data.z[idx], None if data.m is None else data.m[idx], data.grid, data.tag, data.path_ids[idx],
    )


def rmse_ladder(claim, train, test, sizes, basis=None, use_psi=True):
    """Out-of-sample RMSE after fitting on the first ``size`` training paths."""
    out = []
    for size in sizes:
        hedge = regress_integrands(claim, subset(train, slice(0, int(size))), basis, use_psi)
        out.append(replicate(claim, hedge, test).rmse)
    return np.array(out)


# --------------------------------------------------------------------------
# completeness


@dataclass
class CompletenessRow:
    scenario: str
    claim: str
    identical_vol: bool
    rmse_full: float
    rmse_brownian: float

    @property
    def gap(self):
        """Relative RMSE increase when the jump integrand is dropped."""
        if self.rmse_full == 0:
            return 0.0 if self.rmse_brownian == 0 else math.inf
        return self.rmse_brownian / self.rmse_full - 1.0


@dataclass
class CompletenessSummary:
    rows: list
    failures: list

    @property
    def passed(self):
        return not self.failures


def completeness_report(rows, identical_tol=0.10, jump_gap=0.50):
    """Tabulate ablation gaps; identical-vol scenarios must show none, jump ones must."""
    failures = []
    for r in rows:
        if r.identical_vol and abs(r.gap) >= identical_tol:
            failures.append(f"{r.scenario}/{r.claim}: ablation moved RMSE by {r.gap:.1%}")
        if not r.identical_vol and r.claim.startswith("early switch") and r.gap < jump_gap:
            failures.append(f"{r.scenario}/{r.claim}: jump integrand gap {r.gap:.1%} below {jump_gap:.0%}")
    return CompletenessSummary(list(rows), failures)


HEDGE_COLUMNS = ("step", "mean_phi", "mean_psi", "mean_L")


def hedge_rows(hedge, data):
    """Per-step averages for the hedge CSV; ``mean_L`` re-evaluates the fitted value."""
    rows = []
    for k, f in enumerate(hedge.fits):
        D = _design(data, k, hedge.basis, f.center, f.scale, f.knots, hedge.bucket_edges)
        mean_l = float(pairwise_mean(D @ f.beta_l))
        mean_psi = float(pairwise_mean(hedge.psi[:, k])) if hedge.psi is not None else 0.0
        rows.append([k, repr(float(pairwise_mean(hedge.phi[:, k]))), repr(mean_psi), repr(mean_l)])
    return rows
