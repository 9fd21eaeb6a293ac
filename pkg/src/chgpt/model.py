"""Domain types of the two-regime model and change-point sampling.

Coefficient functions are vectorised callables ``f(t, x)`` evaluated on numpy
arrays.  The registry families (:class:`Constant`, :class:`Affine`,
:class:`BoundedSigmoid`) are plain frozen dataclasses so that scenarios stay
picklable and their ``repr`` is a stable fingerprint.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import CompensatorUndefinedError, ScenarioError, SingularHazardError


class _BeyondHorizon:
    """Marker for a change point that does not occur on ``[0, T]``."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "BEYOND_HORIZON"

    def __reduce__(self):
        return (_BeyondHorizon, ())

    # arithmetic is deliberately undefined: the marker must not leak into sums
    def __float__(self):
        raise TypeError("BEYOND_HORIZON has no numeric value")


BEYOND_HORIZON = _BeyondHorizon()


# --------------------------------------------------------------------------
# coefficient registry


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, t, x):
        return np.full(np.shape(x), float(self.value))

    @property
    def lipschitz(self):
        return 0.0


@dataclass(frozen=True)
class Affine:
    """``a + b*x + c*t``."""

    a: float
    b: float = 0.0
    c: float = 0.0

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.a + self.b * x + self.c * np.asarray(t, dtype=float)

    @property
    def lipschitz(self):
        return abs(self.b)


@dataclass(frozen=True)
class BoundedSigmoid:
    """``lo + (hi - lo) / (1 + exp(-slope * (x - center)))``; slope-Lipschitz ``(hi-lo)*slope/4``."""

    lo: float
    hi: float
    slope: float = 1.0
    center: float = 0.0

    def __call__(self, t, x):
        z = self.slope * (np.asarray(x, dtype=float) - self.center)
        return self.lo + (self.hi - self.lo) * 0.5 * (1.0 + np.tanh(0.5 * z))

    @property
    def lipschitz(self):
        return abs(self.hi - self.lo) * abs(self.slope) / 4.0


COEFFICIENT_FAMILIES = {
    "constant": Constant,
    "affine": Affine,
    "bounded_sigmoid": BoundedSigmoid,
}


def evaluate(f, t, x):
    """Evaluate a coefficient callable and broadcast the result to ``x``'s shape."""
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.asarray(f(t, x), dtype=float), x.shape)


@dataclass(frozen=True)
class RegimeCoefficients:
    mu1: Callable
    mu2: Callable
    sigma1: Callable
    sigma2: Callable
    lipschitz_K: float = 1.0

    def __post_init__(self):
        if not self.lipschitz_K > 0:
            raise ScenarioError("must be positive", field="coefficients.lipschitz_K")

    def drift(self, t, x, after):
        """Regime-selected drift; ``after`` is the boolean flag ``t > tau``."""
        return np.where(after, evaluate(self.mu2, t, x), evaluate(self.mu1, t, x))

    def vol(self, t, x, after):
        return np.where(after, evaluate(self.sigma2, t, x), evaluate(self.sigma1, t, x))

    def growth_constant(self, lattice=None):
        """Smallest ``K̄`` with ``f(t,x)^2 <= K̄ (1 + x^2)`` over the probe lattice."""
        lattice = lattice or ProbeLattice()
        tt, xx = lattice.mesh()
        worst = 0.0
        for f in (self.mu1, self.mu2, self.sigma1, self.sigma2):
            worst = max(worst, float(np.max(evaluate(f, tt, xx) ** 2 / (1.0 + xx**2))))
        return worst


@dataclass(frozen=True)
class CorrelationRho:
    rho: float

    def __post_init__(self):
        if not (-1.0 <= self.rho <= 1.0) or math.isnan(self.rho):
            raise ScenarioError(f"correlation {self.rho} outside [-1, 1]", field="rho")

    def __float__(self):
        return float(self.rho)


# --------------------------------------------------------------------------
# random times


@dataclass(frozen=True)
class Deterministic:
    t0: float

    def __post_init__(self):
        if not self.t0 > 0:
            raise ScenarioError("deterministic change point must be > 0", field="tau.t0")


@dataclass(frozen=True)
class IndependentLaw:
    cdf: Callable
    density: Callable
    label: str = ""

    @classmethod
    def uniform(cls, low, high):
        if not 0 <= low < high:
            raise ScenarioError("need 0 <= low < high", field="tau.law")
        return cls(
            cdf=_UniformCdf(low, high),
            density=_UniformDensity(low, high),
            label=f"uniform({low!r},{high!r})",
        )

    @classmethod
    def exponential(cls, rate):
        if not rate > 0:
            raise ScenarioError("rate must be positive", field="tau.law.rate")
        return cls(cdf=_ExpCdf(rate), density=_ExpDensity(rate), label=f"exponential({rate!r})")


@dataclass(frozen=True)
class _UniformCdf:
    low: float
    high: float

    def __call__(self, t):
        return np.clip((np.asarray(t, dtype=float) - self.low) / (self.high - self.low), 0.0, 1.0)


@dataclass(frozen=True)
class _UniformDensity:
    low: float
    high: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t >= self.low) & (t <= self.high)
        return np.where(inside, 1.0 / (self.high - self.low), 0.0)


@dataclass(frozen=True)
class _ExpCdf:
    rate: float

    def __call__(self, t):
        return -np.expm1(-self.rate * np.maximum(np.asarray(t, dtype=float), 0.0))


@dataclass(frozen=True)
class _ExpDensity:
    rate: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, self.rate * np.exp(-self.rate * np.maximum(t, 0.0)), 0.0)


@dataclass(frozen=True)
class ConstantIntensity:
    rate: float

    def __call__(self, t, w1, x):
        return np.full(np.shape(w1), float(self.rate))


@dataclass(frozen=True)
class SigmoidDriverIntensity:
    """Intensity ``base + amp * sigmoid(slope * w1)``; reacts to the driving noise."""

    base: float
    amp: float
    slope: float = 1.0

    def __call__(self, t, w1, x):
        w1 = np.asarray(w1, dtype=float)
        return self.base + self.amp * 0.5 * (1.0 + np.tanh(0.5 * self.slope * w1))


INTENSITY_FAMILIES = {
    "constant": ConstantIntensity,
    "sigmoid_driver": SigmoidDriverIntensity,
}


@dataclass(frozen=True)
class Cox:
    intensity: Callable


@dataclass(frozen=True)
class HittingTime:
    level: float

    def __post_init__(self):
        if not self.level > 0:
            raise ScenarioError("hitting level must be > 0", field="tau.level")


RandomTimeSpec = Union[Deterministic, IndependentLaw, Cox, HittingTime]


def validate_random_time(spec, horizon, n_probe=257):
    """Raise :class:`ScenarioError` when ``spec`` breaks its invariants on a probe lattice."""
    ts = np.linspace(0.0, horizon, n_probe)
    if isinstance(spec, IndependentLaw):
        F = np.asarray(spec.cdf(ts), dtype=float)
        f = np.asarray(spec.density(ts), dtype=float)
        if abs(F[0]) > 1e-12:
            raise ScenarioError("cdf(0) must be 0", field="tau.law")
        if np.any(np.diff(F) < -1e-15) or np.any((F < 0) | (F > 1)):
            raise ScenarioError("cdf must be nondecreasing with values in [0,1]", field="tau.law")
        if np.any(f < 0):
            raise ScenarioError("density must be nonnegative", field="tau.law")
        # trapezoid on a fine lattice; kinks of piecewise laws cost O(h^2)
        fine = np.linspace(0.0, horizon, 64 * (n_probe - 1) + 1)
        ff = np.asarray(spec.density(fine), dtype=float)
        integral = np.concatenate(([0.0], np.cumsum(0.5 * (ff[1:] + ff[:-1]) * np.diff(fine))))
        err = np.max(np.abs(integral[::64] - F))
        if err > 1e-6:
            raise ScenarioError(f"density inconsistent with cdf (max gap {err:.2e})", field="tau.law")
    elif isinstance(spec, Cox):
        tt, ww = np.meshgrid(ts, np.linspace(-10, 10, 65), indexing="ij")
        lam = np.asarray(spec.intensity(tt, ww, ww), dtype=float)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ScenarioError("intensity must be finite and nonnegative", field="tau.intensity")
    elif not isinstance(spec, (Deterministic, HittingTime)):
        raise ScenarioError(f"unknown random-time construction {type(spec).__name__}", field="tau")


# --------------------------------------------------------------------------
# grid and scenario


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ScenarioError("horizon must be positive", field="grid.horizon")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ScenarioError("n_steps must be a positive integer", field="grid.n_steps")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        t = np.arange(self.n_steps + 1, dtype=float) * self.dt
        t[-1] = self.horizon
        return t

    def index_at_or_before(self, t):
        """Largest ``k`` with ``t_k <= t`` (clipped to the grid)."""
        k = np.floor(np.asarray(t, dtype=float) / self.dt).astype(np.int64)
        return np.clip(k, 0, self.n_steps)

    def coarsen(self, factor):
        if self.n_steps % factor:
            raise ValueError(f"{factor} does not divide {self.n_steps}")
        return TimeGrid(self.horizon, self.n_steps // factor)


class FiltrationTag(str, enum.Enum):
    FX = "FX"
    GX = "GX"
    G = "G"
    G_TAU = "G_tau"
    GX_TAU = "GX_tau"


@dataclass(frozen=True)
class ScenarioConfig:
    coefficients: RegimeCoefficients
    rho: CorrelationRho
    tau_spec: RandomTimeSpec
    grid: TimeGrid
    s0: float = 1.0
    n_paths: int = 1000
    master_seed: int = 0
    filtration_tag: FiltrationTag = FiltrationTag.G
    # optional rejection window: keep only paths whose change point lies in [lo, hi]
    tau_window: tuple | None = None

    def __post_init__(self):
        if not self.s0 > 0:
            raise ScenarioError("must be positive", field="s0")
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ScenarioError("must be >= 1", field="n_paths")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ScenarioError("must be an unsigned 64-bit integer", field="seed")
        if not isinstance(self.rho, CorrelationRho):
            object.__setattr__(self, "rho", CorrelationRho(float(self.rho)))
        object.__setattr__(self, "filtration_tag", FiltrationTag(self.filtration_tag))
        if self.tau_window is not None:
            lo, hi = self.tau_window
            if not 0 <= lo < hi:
                raise ScenarioError("need 0 <= lo < hi", field="tau.window")

    def replace(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)

    def fingerprint(self):
        """SHA-256 over a canonical description; stable for registry-built scenarios."""
        parts = [
            _describe(self.coefficients),
            f"rho={self.rho.rho!r}",
            _describe(self.tau_spec),
            f"grid={self.grid.horizon!r}/{self.grid.n_steps}",
            f"s0={self.s0!r}",
            f"n_paths={self.n_paths}",
            f"seed={int(self.master_seed)}",
            f"tag={self.filtration_tag.value}",
            f"window={self.tau_window!r}",
        ]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()


def _describe(obj):
    if isinstance(obj, IndependentLaw):
        return f"IndependentLaw({obj.label or _callable_name(obj.cdf)})"
    if isinstance(obj, RegimeCoefficients):
        fs = ", ".join(_callable_name(getattr(obj, n)) for n in ("mu1", "mu2", "sigma1", "sigma2"))
        return f"RegimeCoefficients({fs}, K={obj.lipschitz_K!r})"
    if isinstance(obj, Cox):
        return f"Cox({_callable_name(obj.intensity)})"
    return repr(obj)


def _callable_name(f):
    if hasattr(f, "__dataclass_fields__"):
        return repr(f)
    return getattr(f, "__qualname__", repr(f))


# --------------------------------------------------------------------------
# coefficient validation


@dataclass(frozen=True)
class ProbeLattice:
    horizon: float = 1.0
    n_t: int = 64
    n_x: int = 64
    x_range: tuple = (-10.0, 10.0)

    def __post_init__(self):
        if self.n_t < 1 or self.n_x < 2:
            raise ValueError("probe lattice must be nonempty")

    def mesh(self):
        t = np.linspace(0.0, self.horizon, self.n_t)
        x = np.linspace(self.x_range[0], self.x_range[1], self.n_x)
        return np.meshgrid(t, x, indexing="ij")


@dataclass(frozen=True)
class Violation:
    kind: str  # "positivity" | "lipschitz" | "continuity"
    function: str
    t: float
    x: float
    detail: float


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations

    def kinds(self):
        return {v.kind for v in self.violations}


def validate_coefficients(coeffs, lattice=None, continuity_step=1e-7, continuity_tol=1e-4):
    """Probe positivity, Lipschitz and continuity requirements on ``lattice``.

    Violations are returned as data; nothing is raised.
    """
    lattice = lattice or ProbeLattice()
    tt, xx = lattice.mesh()
    K = coeffs.lipschitz_K
    report = ValidationReport()
    names = ("mu1", "mu2", "sigma1", "sigma2")
    for name in names:
        f = getattr(coeffs, name)
        vals = evaluate(f, tt, xx)
        dx = np.diff(xx, axis=1)
        slopes = np.abs(np.diff(vals, axis=1))
        bad = slopes > K * dx * (1 + 1e-12) + 1e-15
        for i, j in zip(*np.nonzero(bad)):
            report.violations.append(
                Violation("lipschitz", name, float(tt[i, j]), float(xx[i, j]), float(slopes[i, j] / dx[i, j]))
            )
        if name.startswith("sigma"):
            bad = ~(vals > 0) | ~np.isfinite(vals)
            for i, j in zip(*np.nonzero(bad)):
                report.violations.append(Violation("positivity", name, float(tt[i, j]), float(xx[i, j]), float(vals[i, j])))
            h = continuity_step
            for dt_, dx_ in ((h, 0.0), (0.0, h), (h, h)):
                t2 = np.clip(tt + dt_, 0.0, lattice.horizon)
                jump = np.abs(evaluate(f, t2, xx + dx_) - vals)
                bad = jump > continuity_tol * (1.0 + np.abs(vals))
                for i, j in zip(*np.nonzero(bad)):
                    report.violations.append(
                        Violation("continuity", name, float(tt[i, j]), float(xx[i, j]), float(jump[i, j]))
                    )
    return report


def identical_volatility(coeffs, lattice=None):
    """True when ``sigma1 == sigma2`` on every probe node."""
    lattice = lattice or ProbeLattice()
    tt, xx = lattice.mesh()
    return bool(np.array_equal(evaluate(coeffs.sigma1, tt, xx), evaluate(coeffs.sigma2, tt, xx)))


# --------------------------------------------------------------------------
# change-point sampling


def _check_u(u):
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise ValueError("uniform draw must lie in the open interval (0, 1)")
    return u


def sample_tau(spec, w1, x, grid, u):
    """Sample the change point for a single path.

    Returns a float in ``[0, T]`` or :data:`BEYOND_HORIZON`.
    """
    w1 = None if w1 is None else np.asarray(w1, dtype=float)[None, :]
    x = None if x is None else np.asarray(x, dtype=float)[None, :]
    tau = sample_tau_batch(spec, w1, x, grid, np.atleast_1d(u))[0]
    return BEYOND_HORIZON if np.isinf(tau) else float(tau)


def sample_tau_batch(spec, w1, x, grid, u):
    """Vectorised :func:`sample_tau`; beyond-horizon entries are ``+inf``."""
    u = _check_u(u)
    T = grid.horizon
    if isinstance(spec, Deterministic):
        return np.full(u.shape, spec.t0 if spec.t0 <= T else np.inf)
    if isinstance(spec, IndependentLaw):
        return _invert_cdf(spec.cdf, u, T)
    if isinstance(spec, Cox):
        lam = _intensity_on_grid(spec, w1, x, grid)
        cum = _cumulative_trapezoid(lam, grid.dt)
        return _invert_cumulative(cum, -np.log1p(-u), grid)
    if isinstance(spec, HittingTime):
        return _hitting_time(spec.level, w1, grid, u)
    raise TypeError(f"unsupported random time {type(spec).__name__}")


def _invert_cdf(cdf, u, T, iters=80):
    """Generalised inverse ``inf{t : F(t) >= u}`` restricted to ``[0, T]``."""
    FT = float(np.asarray(cdf(T)))
    lo = np.zeros_like(u)
    hi = np.full_like(u, T)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = np.asarray(cdf(mid), dtype=float) >= u
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return np.where(u <= FT, hi, np.inf)


def _intensity_on_grid(spec, w1, x, grid):
    if w1 is None:
        raise ValueError("Cox sampling needs the simulated driver path")
    t = np.broadcast_to(grid.times, w1.shape)
    xx = np.zeros_like(w1) if x is None else x
    lam = np.broadcast_to(np.asarray(spec.intensity(t, w1, xx), dtype=float), w1.shape)
    if np.any(lam < 0):
        raise ValueError("negative intensity encountered")
    return lam


def _cumulative_trapezoid(vals, dt):
    inc = 0.5 * (vals[..., 1:] + vals[..., :-1]) * dt
    out = np.zeros(vals.shape)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out


def _invert_cumulative(cum, level, grid):
    """First time the piecewise-linear interpolant of ``cum`` reaches ``level``."""
    reached = cum >= level[:, None]
    hit = reached.any(axis=1)
    k1 = np.argmax(reached, axis=1)  # first node at/after the level
    k0 = np.maximum(k1 - 1, 0)
    rows = np.arange(cum.shape[0])
    c0, c1 = cum[rows, k0], cum[rows, k1]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(c1 > c0, (level - c0) / (c1 - c0), 1.0)
    t = grid.times
    tau = t[k0] + np.clip(frac, 0.0, 1.0) * (t[k1] - t[k0])
    return np.where(hit, tau, np.inf)


def crossing_probabilities(w1, level, dt):
    """Per-step probability that a Brownian bridge between the nodes touches ``level``."""
    a = level
    w0, w1n = w1[..., :-1], w1[..., 1:]
    d0, d1 = a - w0, a - w1n
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * np.maximum(d0, 0.0) * np.maximum(d1, 0.0) / dt)
    return np.where((d0 <= 0) | (d1 <= 0), 1.0, p)


def _hitting_time(level, w1, grid, u):
    if w1 is None:
        raise ValueError("hitting-time sampling needs the simulated driver path")
    dt = grid.dt
    p = crossing_probabilities(w1, level, dt)
    with np.errstate(divide="ignore"):
        hazard = -np.log1p(-p)
    cum = np.zeros(w1.shape)
    np.cumsum(hazard, axis=1, out=cum[:, 1:])
    target = -np.log1p(-u)
    reached = cum >= target[:, None]
    hit = reached.any(axis=1)
    k1 = np.argmax(reached, axis=1)
    k = np.maximum(k1 - 1, 0)
    rows = np.arange(w1.shape[0])
    # residual uniform inside the crossing step from the survival bracket
    s0 = np.exp(-cum[rows, k])
    s1 = np.exp(-cum[rows, k1])
    with np.errstate(invalid="ignore", divide="ignore"):
        resid = np.where(s0 > s1, (s0 - (1.0 - u)) / (s0 - s1), 0.5)
    resid = np.clip(resid, 1e-12, 1 - 1e-12)
    tau = np.full(u.shape, np.inf)
    t = grid.times
    for i in np.nonzero(hit)[0]:
        frac = bridge_first_passage_fraction(level - w1[i, k[i]], abs(w1[i, k[i] + 1] - level), dt, resid[i])
        tau[i] = t[k[i]] + frac * (t[k[i] + 1] - t[k[i]])
    return tau


def bridge_first_passage_fraction(d_start, d_end, h, u, n_nodes=512):
    """Inverse-cdf draw of where inside a step of length ``h`` the level is first hit.

    ``d_start`` is the distance from the level at the left node, ``d_end`` the
    distance at the right node.  The conditional density of the passage time
    ``s`` is proportional to ``s**-1.5 exp(-d_start²/2s) (h-s)**-0.5 exp(-d_end²/2(h-s))``.
    """
    d_start = max(float(d_start), 0.0)
    if d_start == 0.0:
        return 0.0
    s = (np.arange(n_nodes) + 0.5) / n_nodes * h
    logf = (
        math.log(d_start)
        - 1.5 * np.log(s)
        - d_start**2 / (2 * s)
        - 0.5 * np.log(h - s)
        - d_end**2 / (2 * (h - s))
    )
    w = np.exp(logf - logf.max())
    c = np.cumsum(w)
    c /= c[-1]
    j = int(np.searchsorted(c, u))
    j = min(j, n_nodes - 1)
    lo = c[j - 1] if j > 0 else 0.0
    frac_in_cell = (u - lo) / (c[j] - lo) if c[j] > lo else 0.5
    return float((j + frac_in_cell) / n_nodes)


# --------------------------------------------------------------------------
# compensators


def tau_compensator(spec, tau, grid, w1=None, x=None):
    """Compensator ``A_t`` of ``1{tau <= t}`` on the grid, frozen after ``tau``.

    ``tau`` may be a scalar (single path) or an array (batch, ``inf`` for
    beyond horizon).  IndependentLaw uses the exact hazard integral
    ``-log(1 - F(t ∧ tau))``; Cox uses the trapezoid of the intensity with a
    partial last step up to ``tau``.
    """
    scalar = np.ndim(tau) == 0 and not isinstance(tau, np.ndarray)
    if tau is BEYOND_HORIZON:
        tau = np.inf
    tau_arr = np.atleast_1d(np.asarray(tau, dtype=float))
    t = grid.times
    stop = np.minimum(t[None, :], tau_arr[:, None])
    if isinstance(spec, IndependentLaw):
        F = np.asarray(spec.cdf(stop), dtype=float)
        if np.any(F >= 1.0):
            raise SingularHazardError("cdf reaches 1 before the change point: hazard blows up")
        A = -np.log1p(-F)
    elif isinstance(spec, Cox):
        if w1 is None:
            raise ValueError("Cox compensator needs the driver path")
        w1 = np.atleast_2d(w1)
        x = np.zeros_like(w1) if x is None else np.atleast_2d(x)
        lam = _intensity_on_grid(spec, w1, x, grid)
        cum = _cumulative_trapezoid(lam, grid.dt)
        A = _interp_rows(cum, grid, np.minimum(tau_arr, grid.horizon))
        A = np.where(t[None, :] <= tau_arr[:, None], cum, A[:, None])
    elif isinstance(spec, (Deterministic, HittingTime)):
        raise CompensatorUndefinedError("compensator undefined for predictable time")
    else:
        raise TypeError(f"unsupported random time {type(spec).__name__}")
    return A[0] if scalar else A


def _interp_rows(cum, grid, s):
    """Row-wise linear interpolation of grid arrays at times ``s``."""
    k = np.minimum(grid.index_at_or_before(s), grid.n_steps - 1)
    t = grid.times
    rows = np.arange(cum.shape[0])
    frac = (s - t[k]) / (t[k + 1] - t[k])
    return cum[rows, k] + frac * (cum[rows, k + 1] - cum[rows, k])


# the name used across the labs for the IndependentLaw case
independent_tau_compensator = tau_compensator
