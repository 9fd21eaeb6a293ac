"""Constructions that only use what the price reveals.

Realized variance windows, change-point detection from the volatility level,
the normalised drivers ``Ŷ = ∫ V⁻¹ dX`` and ``Ȳ = ∫ σ⁻¹ dX``, and the
compensated jump martingale of the change point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScenarioError
from .model import evaluate, identical_volatility, tau_compensator

UNDETECTABLE = "undetectable"
NO_SWITCH = "none"
SEPARATION_FLOOR = 1e-6


@dataclass(frozen=True)
class QvDerivativeEstimate:
    """Backward-window realized variance per unit time; NaN where unavailable."""

    v2_hat: np.ndarray
    window_w: int

    @property
    def first_index(self):
        return self.window_w


def realized_qv_derivative(x, grid, window_w):
    """``v2_hat[k] = Σ_{j=k-w+1..k} (Δx_j)² / (w dt)``, using data up to ``t_k`` only."""
    w = int(window_w)
    if w < 2:
        raise ValueError("window must span at least 2 steps")
    if w > grid.n_steps / 8:
        raise ValueError(f"window {w} exceeds n_steps/8 = {grid.n_steps / 8:g}")
    x = np.asarray(x, dtype=float)
    sq = np.diff(x, axis=-1) ** 2
    csum = np.zeros(x.shape)
    np.cumsum(sq, axis=-1, out=csum[..., 1:])
    out = np.full(x.shape, np.nan)
    out[..., w:] = np.maximum(csum[..., w:] - csum[..., :-w], 0.0) / (w * grid.dt)
    return QvDerivativeEstimate(out, w)


# --------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class DetectionResult:
    tau_hat: object  # float in [0, T], or "none" / "undetectable"
    switch_index: int | None
    margin: float

    @property
    def detected(self):
        return not isinstance(self.tau_hat, str)

    @property
    def verdict(self):
        return "switch" if self.detected else self.tau_hat


def _regime_variances(coeffs, x, grid):
    t = grid.times
    s1 = evaluate(coeffs.sigma1, t, x) ** 2
    s2 = evaluate(coeffs.sigma2, t, x) ** 2
    return s1, s2


def separated(coeffs, x, grid, floor=SEPARATION_FLOOR):
    """Whether the two variance levels stay apart along each path."""
    s1, s2 = _regime_variances(coeffs, np.asarray(x, dtype=float), grid)
    gap = np.abs(s1 - s2) / np.maximum(np.maximum(s1, s2), np.finfo(float).tiny)
    return np.min(gap, axis=-1) > floor


def classify_nodes(estimate, coeffs, x, grid):
    """Per-node regime guess: 1 where the estimate is strictly nearer ``σ²²``.

    Ties go to the first regime.  Unavailable nodes are -1.
    """
    s1, s2 = _regime_variances(coeffs, np.asarray(x, dtype=float), grid)
    v = estimate.v2_hat
    d1, d2 = np.abs(v - s1), np.abs(v - s2)
    cls = (d2 < d1).astype(np.int8)
    return np.where(np.isnan(v), np.int8(-1), cls), d1 - d2


def detect_change_point(estimate, coeffs, x, grid, run_length=3, floor=SEPARATION_FLOOR):
    """Declare the change point at the first node opening a run of second-regime calls."""
    res = detect_batch(estimate, coeffs, x, grid, run_length, floor)
    return res[0] if np.ndim(x) == 1 else res


def detect_batch(estimate, coeffs, x, grid, run_length=3, floor=SEPARATION_FLOOR):
    if run_length < 1:
        raise ValueError("run length must be >= 1")
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    est = QvDerivativeEstimate(np.atleast_2d(estimate.v2_hat), estimate.window_w)
    cls, gap = classify_nodes(est, coeffs, x2, grid)
    ok = separated(coeffs, x2, grid, floor)
    t = grid.times
    r = int(run_length)
    is2 = (cls == 1).astype(np.int32)
    csum = np.zeros((x2.shape[0], x2.shape[1] + 1), dtype=np.int32)
    np.cumsum(is2, axis=1, out=csum[:, 1:])
    # run[k] = number of regime-2 calls in nodes k..k+r-1
    run = csum[:, r:] - csum[:, :-r]
    opens = run == r
    out = []
    for i in range(x2.shape[0]):
        if not ok[i]:
            out.append(DetectionResult(UNDETECTABLE, None, float("nan")))
            continue
        hits = np.flatnonzero(opens[i])
        if hits.size == 0:
            out.append(DetectionResult(NO_SWITCH, None, float("nan")))
            continue
        k = int(hits[0])
        out.append(DetectionResult(float(t[k]), k, float(gap[i, k])))
    return out


def recovered_regime(results, grid):
    """Regime flag implied by detection results: 1 from the declared switch on."""
    n1 = grid.n_steps + 1
    flags = np.zeros((len(results), n1), dtype=np.int8)
    for i, r in enumerate(results):
        if r.detected:
            flags[i, r.switch_index :] = 1
    return flags


DETECTION_COLUMNS = ("path_id", "tau_true", "tau_hat", "abs_error", "margin", "verdict")


def detection_rows(path_ids, tau_true, results):
    rows = []
    for pid, tt, r in zip(path_ids, tau_true, results):
        tau_true_s = "inf" if not np.isfinite(tt) else repr(float(tt))
        if r.detected:
            err = abs(r.tau_hat - tt) if np.isfinite(tt) else float("inf")
            rows.append([int(pid), tau_true_s, repr(r.tau_hat), repr(float(err)), repr(r.margin), r.verdict])
        else:
            rows.append([int(pid), tau_true_s, "", "", "", r.verdict])
    return rows


# --------------------------------------------------------------------------
# normalised drivers


def build_yhat(x, v, grid=None):
    """``Ŷ[k] = Σ_{j<=k} Δx_j / v_{j-1}``, the integrand read at the left node."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0)):
        raise ValueError("volatility must be strictly positive to normalise the price")
    out = np.zeros(x.shape)
    np.cumsum(np.diff(x, axis=-1) / v[..., :-1], axis=-1, out=out[..., 1:])
    return out


def build_ybar(x, coeffs, grid):
    """``Ȳ[k] = Σ_{j<=k} Δx_j / σ(t_{j-1}, x_{j-1})`` for a common volatility ``σ``."""
    if not identical_volatility(coeffs):
        raise ScenarioError("needs identical volatility functions in both regimes", field="coefficients.sigma2")
    x = np.asarray(x, dtype=float)
    sig = evaluate(coeffs.sigma1, grid.times[:-1], x[..., :-1])
    out = np.zeros(x.shape)
    np.cumsum(np.diff(x, axis=-1) / sig, axis=-1, out=out[..., 1:])
    return out


def reconstruct_from_ybar(ybar, coeffs, grid):
    """Forward recursion ``X_{k+1} = X_k + σ(t_k, X_k) ΔȲ_k`` from ``X_0 = 0``."""
    ybar = np.asarray(ybar, dtype=float)
    dy = np.diff(ybar, axis=-1)
    t = grid.times
    x = np.zeros(ybar.shape)
    for k in range(dy.shape[-1]):
        x[..., k + 1] = x[..., k] + evaluate(coeffs.sigma1, t[k], x[..., k]) * dy[..., k]
    return x


# --------------------------------------------------------------------------
# jump martingale


@dataclass(frozen=True)
class JumpMartingale:
    m: np.ndarray
    a: np.ndarray


def build_jump_martingale(tau, compensator, grid):
    """``m[k] = 1{tau <= t_k} - a[k]``; ``tau`` is ``inf`` when there is no switch."""
    a = np.asarray(compensator, dtype=float)
    tau = np.asarray(tau, dtype=float)
    ind = grid.times >= (tau[..., None] if tau.ndim else tau)
    return JumpMartingale(ind.astype(float) - a, a)


def jump_martingale_for(spec, tau, grid, w1=None, x=None):
    """Compensate the change point of ``spec`` and build the jump martingale."""
    a = tau_compensator(spec, np.asarray(tau, dtype=float), grid, w1, x)
    return build_jump_martingale(tau, a, grid)


# --------------------------------------------------------------------------
# adaptedness


def audit_adaptedness(fn, grid, arrays, indices, atol=0.0):
    """Recompute ``fn`` on inputs truncated at each index and compare with the full run.

    ``fn(grid, *arrays)`` must return an array over the grid.  Returns the
    indices at which a value depended on later data.
    """
    from .model import TimeGrid

    full = np.asarray(fn(grid, *arrays))
    bad = []
    for k in indices:
        k = int(k)
        sub = TimeGrid(float(grid.times[k]), k)
        part = np.asarray(fn(sub, *(np.asarray(a)[..., : k + 1] for a in arrays)))
        ref = full[..., : k + 1]
        same = np.isclose(part, ref, rtol=0.0, atol=atol, equal_nan=True) if atol else (
            (part == ref) | (np.isnan(part) & np.isnan(ref))
        )
        if not np.all(same):
            bad.append(k)
    return bad
