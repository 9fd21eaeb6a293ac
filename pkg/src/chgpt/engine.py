"""Euler simulation of the regime-switching SDE with an exact split at the change point.

Randomness is drawn per path from a counter-based Philox stream keyed by
``(master_seed, path_index)``, and paths are processed in fixed-size blocks,
so results do not depend on how blocks are spread over workers.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalOverflowError
from .model import (
    Cox,
    HittingTime,
    ScenarioConfig,
    TimeGrid,
    evaluate,
    sample_tau_batch,
)

BLOCK_SIZE = 1024
MAX_REJECTION_ROUNDS = 10_000


def path_stream(master_seed, path_index):
    """Independent Philox stream for one path."""
    key = (int(path_index) << 64) | (int(master_seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class PathBundle:
    """Simulated paths; arrays are ``(n_paths, n_steps + 1)`` unless noted.

    ``tau`` holds ``+inf`` for paths whose change point lies beyond the horizon;
    ``w1_tau``/``w2_tau`` are the driver values at the change point (NaN when
    there is none).
    """

    path_ids: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    x: np.ndarray
    s: np.ndarray
    v: np.ndarray
    regime: np.ndarray
    tau: np.ndarray
    w1_tau: np.ndarray
    w2_tau: np.ndarray
    theta_info: dict | None = None

    def __len__(self):
        return len(self.path_ids)

    @property
    def switched(self):
        return np.isfinite(self.tau)

    def select(self, idx):
        idx = np.atleast_1d(idx) if np.ndim(idx) == 0 else idx
        return PathBundle(
            self.path_ids[idx], self.w1[idx], self.w2[idx], self.x[idx], self.s[idx], self.v[idx],
            self.regime[idx], self.tau[idx], self.w1_tau[idx], self.w2_tau[idx],
            None if self.theta_info is None else {k: v[idx] for k, v in self.theta_info.items()},
        )

    @classmethod
    def concat(cls, parts):
        names = ("path_ids", "w1", "w2", "x", "s", "v", "regime", "tau", "w1_tau", "w2_tau")
        return cls(*(np.concatenate([getattr(p, n) for p in parts]) for n in names))


@dataclass
class SimulationOutput:
    bundle: PathBundle
    grid: TimeGrid
    fingerprint: str
    config: ScenarioConfig = field(repr=False, default=None)


@dataclass
class ComposedDriver:
    w_tilde: np.ndarray

    def realized_qv(self):
        return np.sum(np.diff(self.w_tilde, axis=-1) ** 2, axis=-1)


# --------------------------------------------------------------------------
# core integrator


# overflow surfaces as NumericalOverflowError once the loop is done
@np.errstate(over="ignore", invalid="ignore")
def integrate_paths(coeffs, rho, grid, w1, w2, tau, w1_tau=None, w2_tau=None, path_ids=None):
    """Euler–Maruyama on the two-regime SDE, splitting the step that contains ``tau``.

    Returns ``(x, v, regime, qv)`` where ``qv`` is the accumulated ``∫ V² dt``.
    Missing ``w1_tau``/``w2_tau`` are filled by linear interpolation.
    """
    w1 = np.atleast_2d(w1)
    w2 = np.atleast_2d(w2)
    P, n1 = w1.shape
    n = n1 - 1
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (P,))
    t = grid.times
    dt = np.diff(t)
    rho = float(rho)
    rc = math.sqrt(max(1.0 - rho * rho, 0.0))

    k_tau = np.where(np.isfinite(tau), grid.index_at_or_before(np.where(np.isfinite(tau), tau, 0.0)), -1)
    k_tau = np.where(k_tau >= n, -1, k_tau)  # a change point at T never splits a step
    if w1_tau is None or w2_tau is None:
        w1_tau, w2_tau = linear_tau_values(w1, w2, tau, grid)

    x = np.zeros((P, n1))
    v = np.empty((P, n1))
    qv = np.zeros((P, n1))
    xk = np.zeros(P)
    qk = np.zeros(P)
    for k in range(n):
        after = t[k] > tau
        mu = coeffs.drift(t[k], xk, after)
        sig = coeffs.vol(t[k], xk, after)
        v[:, k] = sig
        dw1 = w1[:, k + 1] - w1[:, k]
        dw = np.where(after, rho * dw1 + rc * (w2[:, k + 1] - w2[:, k]), dw1)
        dx = mu * dt[k] + sig * dw
        dq = sig * sig * dt[k]
        split = np.nonzero(k_tau == k)[0]
        if split.size:
            tk, xs = tau[split], xk[split]
            d1 = tk - t[k]
            d2 = t[k + 1] - tk
            m1 = evaluate(coeffs.mu1, t[k], xs)
            s1 = evaluate(coeffs.sigma1, t[k], xs)
            x_mid = xs + m1 * d1 + s1 * (w1_tau[split] - w1[split, k])
            m2 = evaluate(coeffs.mu2, tk, x_mid)
            s2 = evaluate(coeffs.sigma2, tk, x_mid)
            dwb = rho * (w1[split, k + 1] - w1_tau[split]) + rc * (w2[split, k + 1] - w2_tau[split])
            dx[split] = x_mid + m2 * d2 + s2 * dwb - xs
            dq[split] = s1 * s1 * d1 + s2 * s2 * d2
        xk = xk + dx
        qk = qk + dq
        x[:, k + 1] = xk
        qv[:, k + 1] = qk
    after = t[n] > tau
    v[:, n] = coeffs.vol(t[n], xk, after)
    bad = ~np.isfinite(x) | ~np.isfinite(v)
    if bad.any():
        p, k = np.argwhere(bad)[0]
        raise NumericalOverflowError(p if path_ids is None else path_ids[p], k)
    regime = (t[None, :] > tau[:, None]).astype(np.int8)
    return x, v, regime, qv


def linear_tau_values(w1, w2, tau, grid):
    w1_tau = _interp_at(w1, tau, grid)
    w2_tau = _interp_at(w2, tau, grid)
    return w1_tau, w2_tau


def _interp_at(w, tau, grid, noise=None):
    """Value of each row at time ``tau``: linear interpolation plus optional bridge noise."""
    P = w.shape[0]
    out = np.full(P, np.nan)
    ok = np.isfinite(tau)
    if not ok.any():
        return out
    n = grid.n_steps
    tt = np.minimum(tau[ok], grid.horizon)
    k = np.minimum(grid.index_at_or_before(tt), n - 1)
    t = grid.times
    h = t[k + 1] - t[k]
    frac = np.clip((tt - t[k]) / h, 0.0, 1.0)
    rows = np.nonzero(ok)[0]
    val = w[rows, k] + frac * (w[rows, k + 1] - w[rows, k])
    if noise is not None:
        val = val + np.sqrt(frac * (1.0 - frac) * h) * noise[ok]
    out[ok] = val
    return out


def exponential_from_log(x, qv, s0):
    """``S = s0 exp(X - ½[X])`` from the accumulated quadratic variation."""
    return s0 * np.exp(np.asarray(x) - 0.5 * np.asarray(qv))


# --------------------------------------------------------------------------
# path generation


def _draw(gen, n):
    u = gen.random()
    while u == 0.0:
        u = gen.random()
    z = gen.standard_normal(2 * n + 2)
    return u, z


def _simulate_block(config, start, stop):
    grid = config.grid
    n = grid.n_steps
    sq = math.sqrt(grid.dt)
    ids = np.arange(start, stop)
    P = len(ids)
    gens = [path_stream(config.master_seed, i) for i in ids]
    u = np.empty(P)
    z = np.empty((P, 2 * n + 2))
    for j, g in enumerate(gens):
        u[j], z[j] = _draw(g, n)

    def build(rows):
        dw = z[rows, : 2 * n].reshape(len(rows), 2, n) * sq
        w = np.zeros((len(rows), 2, n + 1))
        np.cumsum(dw, axis=2, out=w[:, :, 1:])
        return w[:, 0], w[:, 1]

    w1, w2 = build(np.arange(P))
    tau = _sample_block_tau(config, w1, w2, u, ids)
    pending = _outside_window(config, tau)
    rounds = 0
    while pending.any():
        rounds += 1
        if rounds > MAX_REJECTION_ROUNDS:
            raise RuntimeError("change-point window rejection did not terminate")
        rows = np.nonzero(pending)[0]
        for j in rows:
            u[j], z[j] = _draw(gens[j], n)
        w1[rows], w2[rows] = build(rows)
        tau[rows] = _sample_block_tau(config, w1[rows], w2[rows], u[rows], ids[rows])
        pending[rows] = _outside_window(config, tau[rows])

    xi1, xi2 = z[:, 2 * n], z[:, 2 * n + 1]
    w1_tau = _interp_at(w1, tau, grid, xi1)
    w2_tau = _interp_at(w2, tau, grid, xi2)
    if isinstance(config.tau_spec, HittingTime):
        w1_tau = np.where(np.isfinite(tau), config.tau_spec.level, np.nan)
    coeffs = config.coefficients
    x, v, regime, qv = integrate_paths(coeffs, config.rho.rho, grid, w1, w2, tau, w1_tau, w2_tau, ids)
    s = exponential_from_log(x, qv, config.s0)
    return PathBundle(ids, w1, w2, x, s, v, regime, tau, w1_tau, w2_tau)


def _sample_block_tau(config, w1, w2, u, ids):
    spec = config.tau_spec
    x_pre = None
    if isinstance(spec, Cox):
        # before tau the state follows the first regime, whatever tau turns out to be
        x_pre, _, _, _ = integrate_paths(
            config.coefficients, config.rho.rho, config.grid, w1, w2, np.full(len(u), np.inf), path_ids=ids
        )
    return sample_tau_batch(spec, w1, x_pre, config.grid, u)


def _outside_window(config, tau):
    if config.tau_window is None:
        return np.zeros(tau.shape, dtype=bool)
    lo, hi = config.tau_window
    return ~((tau >= lo) & (tau <= hi))


def resolve_workers(workers=None):
    if workers is None:
        workers = int(os.environ.get("CHGPT_WORKERS", "1"))
    return max(1, int(workers))


def simulate_paths(config, workers=None):
    """Simulate ``config.n_paths`` paths; bit-identical for any worker count."""
    starts = list(range(0, config.n_paths, BLOCK_SIZE))
    jobs = [(config, s, min(s + BLOCK_SIZE, config.n_paths)) for s in starts]
    workers = resolve_workers(workers)
    if workers == 1 or len(jobs) == 1:
        parts = [_simulate_block(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_block, *zip(*jobs)))
    bundle = parts[0] if len(parts) == 1 else PathBundle.concat(parts)
    return SimulationOutput(bundle, config.grid, config.fingerprint(), config)


# --------------------------------------------------------------------------
# composed driver


def compose_driver(w1, w2, tau, rho, grid, w1_tau=None, w2_tau=None):
    """Single Brownian motion ``W̃`` that drives the decomposition.

    Before ``tau`` it follows ``w1``; afterwards it accumulates
    ``rho dW1 + sqrt(1-rho²) dW2``, with the straddling step split at ``tau``.
    """
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"correlation {rho} outside [-1, 1]")
    single = np.ndim(w1) == 1
    w1 = np.atleast_2d(np.asarray(w1, dtype=float))
    w2 = np.atleast_2d(np.asarray(w2, dtype=float))
    tau = np.atleast_1d(np.asarray(np.inf if tau is None else tau, dtype=float))
    tau = np.broadcast_to(tau, (w1.shape[0],))
    if w1_tau is None or w2_tau is None:
        w1_tau, w2_tau = linear_tau_values(w1, w2, tau, grid)
    w1_tau = np.atleast_1d(w1_tau)
    w2_tau = np.atleast_1d(w2_tau)
    rc = math.sqrt(max(1.0 - rho * rho, 0.0))
    t = grid.times
    after = t[None, :] > tau[:, None]
    safe1 = np.where(np.isfinite(tau), w1_tau, 0.0)[:, None]
    safe2 = np.where(np.isfinite(tau), w2_tau, 0.0)[:, None]
    post = safe1 + rho * (w1 - safe1) + rc * (w2 - safe2)
    wt = np.where(after, post, w1)
    out = wt[0] if single else wt
    return ComposedDriver(out)


# --------------------------------------------------------------------------
# Picard reference


@dataclass
class PicardResult:
    iterates: np.ndarray  # (k_max + 1, ..., n + 1)
    gaps: np.ndarray  # (k_max, ...) sup-norm distance between consecutive iterates


def driver_increments(x, v):
    """``ΔŶ_j = Δx_j / V_j`` with the integrand read at the left node."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.diff(x, axis=-1) / v[..., :-1]


def picard_reference(coeffs, grid, tau, dyhat, k_max):
    """Picard iterates ``X^{k+1} = ∫ f(u, X^k_u) dŶ_u`` starting from ``X⁰ ≡ 0``.

    ``f`` is the random volatility function selected by ``1{t > tau}``.
    The discrete fixed point is the simulated path itself, because
    ``ΔŶ`` was formed with the same left-node volatility.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    dyhat = np.asarray(dyhat, dtype=float)
    t = grid.times[:-1]
    tau = np.asarray(tau, dtype=float)
    after = t > (tau[..., None] if tau.ndim else tau)
    X = np.zeros(dyhat.shape[:-1] + (dyhat.shape[-1] + 1,))
    iterates = [X]
    gaps = []
    for _ in range(k_max):
        f = coeffs.vol(t, X[..., :-1], after)
        nxt = np.zeros_like(X)
        np.cumsum(f * dyhat, axis=-1, out=nxt[..., 1:])
        gaps.append(np.max(np.abs(nxt - X), axis=-1))
        X = nxt
        iterates.append(X)
    return PicardResult(np.stack(iterates), np.stack(gaps))


# --------------------------------------------------------------------------
# strong convergence


@dataclass
class StrongErrorTable:
    n_steps: np.ndarray
    rms_error: np.ndarray
    slope: float


def strong_error_study(config, ladder=tuple(2**j for j in range(8, 14)), n_paths=None):
    """RMS terminal error of ``X_T`` against the finest level on coupled paths.

    Coarse Brownian nodes are subsamples of the finest path.  The driver value
    at the change point is bridged on each level's own grid with that level's
    own normal draws, as an independent run at that resolution would do.
    The slope is fitted on log RMS against log dt, excluding the finest level
    (its error is zero by construction).
    """
    ladder = sorted(int(n) for n in ladder)
    if len(ladder) < 3:
        raise ValueError("strong-error ladder needs at least three levels")
    n_f = ladder[-1]
    if any(n_f % n for n in ladder):
        raise ValueError("every level must divide the finest level")
    P = n_paths or config.n_paths
    fine = TimeGrid(config.grid.horizon, n_f)
    fine_cfg = config.replace(grid=fine, n_paths=P, tau_window=None)
    sq = math.sqrt(fine.dt)
    u = np.empty(P)
    z = np.empty((P, 2 * n_f + 2))
    xi = np.empty((P, len(ladder), 2))
    for j in range(P):
        gen = path_stream(config.master_seed, j)
        u[j], z[j] = _draw(gen, n_f)
        xi[j] = gen.standard_normal((len(ladder), 2))
    dw = z[:, : 2 * n_f].reshape(P, 2, n_f) * sq
    w = np.zeros((P, 2, n_f + 1))
    np.cumsum(dw, axis=2, out=w[:, :, 1:])
    W1f, W2f = w[:, 0], w[:, 1]
    terminal = {}
    for level, n in enumerate(ladder):
        f = n_f // n
        grid = TimeGrid(config.grid.horizon, n)
        w1, w2 = W1f[:, ::f], W2f[:, ::f]
        tau = _sample_block_tau(fine_cfg.replace(grid=grid), w1, w2, u, np.arange(P))
        w1_tau = _interp_at(w1, tau, grid, xi[:, level, 0])
        w2_tau = _interp_at(w2, tau, grid, xi[:, level, 1])
        if isinstance(config.tau_spec, HittingTime):
            w1_tau = np.where(np.isfinite(tau), config.tau_spec.level, np.nan)
        x, _, _, _ = integrate_paths(config.coefficients, config.rho.rho, grid, w1, w2, tau, w1_tau, w2_tau)
        terminal[n] = x[:, -1]
    ref = terminal[n_f]
    rms = np.array([math.sqrt(np.mean((terminal[n] - ref) ** 2)) for n in ladder])
    dts = config.grid.horizon / np.array(ladder, dtype=float)
    coarse = slice(0, len(ladder) - 1)
    with np.errstate(divide="ignore"):
        slope = float(np.polyfit(np.log(dts[coarse]), np.log(rms[coarse]), 1)[0])
    return StrongErrorTable(np.array(ladder), rms, slope)


# --------------------------------------------------------------------------
# raw dump

PATH_COLUMNS = ("path_id", "t", "w1", "w2", "x", "s", "v", "regime")


def write_paths_csv(output, path):
    b = output.bundle
    t = output.grid.times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(PATH_COLUMNS)
        for i in range(len(b)):
            for k in range(len(t)):
                wr.writerow(
                    [int(b.path_ids[i]), repr(float(t[k])), repr(float(b.w1[i, k])), repr(float(b.w2[i, k])),
                     repr(float(b.x[i, k])), repr(float(b.s[i, k])), repr(float(b.v[i, k])), int(b.regime[i, k])]
                )
