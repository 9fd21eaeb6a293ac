"""TOML scenario files.

A scenario names coefficient and intensity families from the built-in
registries and adds the stage settings and the expected verdicts::

    name = "bs_immersion"
    seed = 7
    paths = 2000
    tag = "G"            # FX | GX | G | G_tau | GX_tau
    rho = 0.0
    s0 = 1.0

    [grid]
    horizon = 1.0
    steps = 256

    [coefficients]
    lipschitz_K = 1.0
    mu1 = { family = "constant", value = 0.05 }
    mu2 = { family = "constant", value = 0.05 }
    sigma1 = { family = "constant", value = 0.2 }
    sigma2 = { family = "bounded_sigmoid", lo = 0.1, hi = 0.5, slope = 2.0 }

    [tau]
    kind = "cox"         # deterministic (t0) | independent (law, ...) | cox (intensity) | hitting (level)
    intensity = { family = "constant", rate = 2.0 }
    window = [0.2, 0.8]  # optional rejection window

    [detect]             # all optional
    window = 64
    run_length = 3

    [arbitrage]
    psi = 0.0            # constant jump integrand of the deflator (Cox / independent only)
    checkpoints = 5
    confidence = 0.99

    [hedge]
    claim = "digital"    # digital | early_switch (cutoff) | asset (bound) | constant (value)
    basis_size = 4
    basis = "poly"       # poly | hat

    [expected]
    detect = "switch"    # switch | none | undetectable
    arbitrage = "stable" # stable | diverging | inconclusive
    martingale = true
    hedge = "ok"         # ok | rejected
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ScenarioError
from .model import (
    COEFFICIENT_FAMILIES,
    INTENSITY_FAMILIES,
    Cox,
    CorrelationRho,
    Deterministic,
    FiltrationTag,
    HittingTime,
    IndependentLaw,
    RegimeCoefficients,
    ScenarioConfig,
    TimeGrid,
    validate_random_time,
)

DETECT_VERDICTS = ("switch", "none", "undetectable")
NA1_VERDICTS = ("stable", "diverging", "inconclusive")
HEDGE_STATUSES = ("ok", "rejected")


@dataclass(frozen=True)
class DetectSettings:
    window: int = 64
    run_length: int = 3


@dataclass(frozen=True)
class ArbitrageSettings:
    psi: float = 0.0
    checkpoints: int = 5
    confidence: float = 0.99


@dataclass(frozen=True)
class HedgeSettings:
    claim: str = "digital"
    params: dict = field(default_factory=dict)
    basis_size: int = 4
    basis: str = "poly"
    train_fraction: float = 0.5


@dataclass(frozen=True)
class Scenario:
    name: str
    config: ScenarioConfig
    detect: DetectSettings
    arbitrage: ArbitrageSettings
    hedge: HedgeSettings
    expected: dict
    path: str = ""


def _table(doc, key, where):
    val = doc.get(key, {})
    if not isinstance(val, dict):
        raise ScenarioError("must be a table", field=f"{where}{key}")
    return val


def _number(table, key, where, default=None, kind=float):
    if key not in table:
        if default is None:
            raise ScenarioError("missing", field=f"{where}{key}")
        return default
    val = table[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ScenarioError(f"expected a number, got {val!r}", field=f"{where}{key}")
    if kind is int:
        if int(val) != val:
            raise ScenarioError(f"expected an integer, got {val!r}", field=f"{where}{key}")
        return int(val)
    return float(val)


def _build_family(spec, registry, where):
    if not isinstance(spec, dict):
        raise ScenarioError("must be a table with a 'family' key", field=where)
    spec = dict(spec)
    name = spec.pop("family", None)
    if name not in registry:
        raise ScenarioError(f"unknown family {name!r}; known: {', '.join(sorted(registry))}", field=f"{where}.family")
    cls = registry[name]
    accepted = set(inspect.signature(cls).parameters)
    for key, val in spec.items():
        if key not in accepted:
            raise ScenarioError(f"unknown parameter for {name}", field=f"{where}.{key}")
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ScenarioError(f"expected a number, got {val!r}", field=f"{where}.{key}")
    try:
        return cls(**{k: float(v) for k, v in spec.items()})
    except TypeError as exc:
        raise ScenarioError(str(exc), field=where) from None


def _coefficients(doc):
    tab = _table(doc, "coefficients", "")
    fs = {}
    for name in ("mu1", "mu2", "sigma1", "sigma2"):
        if name not in tab:
            raise ScenarioError("missing", field=f"coefficients.{name}")
        fs[name] = _build_family(tab[name], COEFFICIENT_FAMILIES, f"coefficients.{name}")
    K = _number(tab, "lipschitz_K", "coefficients.", default=1.0)
    return RegimeCoefficients(lipschitz_K=K, **fs)


def _random_time(doc, horizon):
    tab = _table(doc, "tau", "")
    kind = tab.get("kind")
    if kind == "deterministic":
        spec = Deterministic(_number(tab, "t0", "tau."))
    elif kind == "independent":
        law = tab.get("law")
        if law == "uniform":
            spec = IndependentLaw.uniform(_number(tab, "low", "tau.", default=0.0), _number(tab, "high", "tau."))
        elif law == "exponential":
            spec = IndependentLaw.exponential(_number(tab, "rate", "tau."))
        else:
            raise ScenarioError(f"unknown law {law!r}; known: exponential, uniform", field="tau.law")
    elif kind == "cox":
        if "intensity" not in tab:
            raise ScenarioError("missing", field="tau.intensity")
        spec = Cox(_build_family(tab["intensity"], INTENSITY_FAMILIES, "tau.intensity"))
    elif kind == "hitting":
        spec = HittingTime(_number(tab, "level", "tau."))
    else:
        raise ScenarioError(f"unknown kind {kind!r}; known: cox, deterministic, hitting, independent", field="tau.kind")
    validate_random_time(spec, horizon)
    window = tab.get("window")
    if window is not None:
        if not (isinstance(window, list) and len(window) == 2 and all(isinstance(v, (int, float)) for v in window)):
            raise ScenarioError("expected [lo, hi]", field="tau.window")
        window = (float(window[0]), float(window[1]))
    return spec, window


def _expected(doc):
    tab = _table(doc, "expected", "")
    out = {}
    for key, allowed in (("detect", DETECT_VERDICTS), ("arbitrage", NA1_VERDICTS), ("hedge", HEDGE_STATUSES)):
        if key in tab:
            if tab[key] not in allowed:
                raise ScenarioError(f"{tab[key]!r} not in {allowed}", field=f"expected.{key}")
            out[key] = tab[key]
    if "martingale" in tab:
        if not isinstance(tab["martingale"], bool):
            raise ScenarioError("expected true or false", field="expected.martingale")
        out["martingale"] = tab["martingale"]
    for key in ("hedge_rmse_max", "jump_gap_min", "ablation_gap_max"):
        if key in tab:
            out[key] = _number(tab, key, "expected.")
    unknown = set(tab) - set(out)
    if unknown:
        raise ScenarioError("unknown key", field=f"expected.{sorted(unknown)[0]}")
    return out


def parse_scenario(doc, path="", paths=None, steps=None, seed=None):
    """Build a :class:`Scenario` from a parsed TOML document, applying overrides."""
    grid_tab = _table(doc, "grid", "")
    horizon = _number(grid_tab, "horizon", "grid.", default=1.0)
    n_steps = steps if steps is not None else _number(grid_tab, "steps", "grid.", kind=int)
    grid = TimeGrid(horizon, n_steps)
    coeffs = _coefficients(doc)
    spec, window = _random_time(doc, horizon)
    tag = doc.get("tag", "G")
    try:
        tag = FiltrationTag(tag)
    except ValueError:
        raise ScenarioError(f"unknown tag {tag!r}; known: {', '.join(t.value for t in FiltrationTag)}", field="tag") from None
    rho = CorrelationRho(_number(doc, "rho", "", default=0.0))
    config = ScenarioConfig(
        coefficients=coeffs,
        rho=rho,
        tau_spec=spec,
        grid=grid,
        s0=_number(doc, "s0", "", default=1.0),
        n_paths=paths if paths is not None else _number(doc, "paths", "", default=1000, kind=int),
        master_seed=seed if seed is not None else _number(doc, "seed", "", default=0, kind=int),
        filtration_tag=tag,
        tau_window=window,
    )
    d = _table(doc, "detect", "")
    detect = DetectSettings(
        _number(d, "window", "detect.", default=64, kind=int), _number(d, "run_length", "detect.", default=3, kind=int)
    )
    if detect.window < 2 or detect.window > grid.n_steps / 8:
        raise ScenarioError(f"must lie in [2, steps/8 = {grid.n_steps / 8:g}]", field="detect.window")
    if detect.run_length < 1:
        raise ScenarioError("must be >= 1", field="detect.run_length")
    a = _table(doc, "arbitrage", "")
    arb = ArbitrageSettings(
        _number(a, "psi", "arbitrage.", default=0.0),
        _number(a, "checkpoints", "arbitrage.", default=5, kind=int),
        _number(a, "confidence", "arbitrage.", default=0.99),
    )
    if not 0 < arb.confidence < 1:
        raise ScenarioError("must lie in (0, 1)", field="arbitrage.confidence")
    if arb.checkpoints < 2:
        raise ScenarioError("need at least 2 checkpoints (0 and T)", field="arbitrage.checkpoints")
    if not arb.psi > -1:
        raise ScenarioError("must exceed -1", field="arbitrage.psi")
    h = dict(_table(doc, "hedge", ""))
    claim = h.pop("claim", "digital")
    basis_size = _number(h, "basis_size", "hedge.", default=4, kind=int)
    h.pop("basis_size", None)
    basis = h.pop("basis", "poly")
    train = _number(h, "train_fraction", "hedge.", default=0.5)
    h.pop("train_fraction", None)
    from .hedging import CLAIMS

    if claim not in CLAIMS:
        raise ScenarioError(f"unknown claim {claim!r}; known: {', '.join(sorted(CLAIMS))}", field="hedge.claim")
    if basis not in ("poly", "hat"):
        raise ScenarioError(f"unknown basis {basis!r}", field="hedge.basis")
    if basis_size < 3:
        raise ScenarioError("must be >= 3", field="hedge.basis_size")
    if not 0 < train < 1:
        raise ScenarioError("must lie in (0, 1)", field="hedge.train_fraction")
    hedge = HedgeSettings(claim, h, basis_size, basis, train)
    name = doc.get("name") or (Path(path).stem if path else "scenario")
    return Scenario(str(name), config, detect, arb, hedge, _expected(doc), str(path))


def load_scenario(path, **overrides):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"not valid TOML: {exc}", field="<file>") from None
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", field="<file>") from None
    return parse_scenario(doc, path, **overrides)


def describe(scenario):
    """JSON-ready description of the resolved configuration."""
    cfg = scenario.config
    return {
        "name": scenario.name,
        "coefficients": {n: repr(getattr(cfg.coefficients, n)) for n in ("mu1", "mu2", "sigma1", "sigma2")},
        "lipschitz_K": cfg.coefficients.lipschitz_K,
        "rho": cfg.rho.rho,
        "tau": repr(cfg.tau_spec) if not isinstance(cfg.tau_spec, IndependentLaw) else cfg.tau_spec.label,
        "tau_window": list(cfg.tau_window) if cfg.tau_window else None,
        "horizon": cfg.grid.horizon,
        "n_steps": cfg.grid.n_steps,
        "s0": cfg.s0,
        "n_paths": cfg.n_paths,
        "master_seed": int(cfg.master_seed),
        "tag": cfg.filtration_tag.value,
        "detect": vars(scenario.detect),
        "arbitrage": vars(scenario.arbitrage),
        "hedge": {"claim": scenario.hedge.claim, "params": scenario.hedge.params,
                  "basis_size": scenario.hedge.basis_size, "basis": scenario.hedge.basis,
                  "train_fraction": scenario.hedge.train_fraction},
        "expected": scenario.expected,
    }
