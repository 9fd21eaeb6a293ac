"""Batch front door: scenario file in, stage reports out.

Exit codes: 0 success, 2 scenario/schema error, 3 numerical abort,
4 verification mismatch, 5 report requested with missing stages.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import schema
from .arbitrage import (
    DIVERGING,
    STABLE,
    build_deflator,
    default_checkpoints,
    deflated_price_test,
    market_price_of_risk,
    na1_statistic,
    pairwise_mean,
    shrinkage_consistency,
    tag_brownian,
)
from .engine import compose_driver, resolve_workers, simulate_paths, write_paths_csv
from .errors import (
    ArbitrageDetectedError,
    NumericalOverflowError,
    PathInconsistencyError,
    ScenarioError,
    SingularHazardError,
    UnsupportedScenarioError,
)
from .filtration import DETECTION_COLUMNS, detect_batch, detection_rows, jump_martingale_for, realized_qv_derivative
from .hedging import CLAIMS, HEDGE_COLUMNS, BasisSpec, hedge_rows, prepare_hedge_data, regress_integrands, replicate, subset
from .model import Cox, IndependentLaw
from .scenario import describe, load_scenario

STAGES = ("simulate", "detect", "arbitrage", "hedge", "report")
EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_VERIFY, EXIT_MISSING = 0, 2, 3, 4, 5
HEDGE_LADDER = (1_000, 10_000, 100_000)


def _f(x):
    """JSON-safe float: non-finite values become strings."""
    x = float(x)
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def write_json(path, obj):
    text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\r\n")
        wr.writerow(header)
        wr.writerows(rows)


def _moments(v):
    v = np.asarray(v, dtype=float)
    m = pairwise_mean(v)
    sd = math.sqrt(pairwise_mean((v - m) ** 2) * len(v) / max(len(v) - 1, 1))
    return {"mean": _f(m), "std": _f(sd), "se": _f(sd / math.sqrt(len(v)))}


# --------------------------------------------------------------------------
# stages


def stage_simulate(sc, output, out):
    b, grid = output.bundle, output.grid
    finite = b.tau[np.isfinite(b.tau)]
    counts, edges = np.histogram(finite, bins=10, range=(0.0, grid.horizon))
    summary = {
        "schema_version": schema.SCHEMA_VERSION,
        "scenario": sc.name,
        "fingerprint": output.fingerprint,
        "n_paths": len(b),
        "n_steps": grid.n_steps,
        "horizon": grid.horizon,
        "x_T": _moments(b.x[:, -1]),
        "s_T": _moments(b.s[:, -1]),
        "tau": {
            "bin_edges": [_f(e) for e in edges],
            "counts": [int(c) for c in counts],
            "beyond_horizon": int(np.sum(~np.isfinite(b.tau))),
        },
    }
    write_json(out / schema.SUMMARY, summary)
    return True, summary


def stage_detect(sc, output, out):
    b, grid = output.bundle, output.grid
    cfg = sc.config
    w = sc.detect.window
    est = realized_qv_derivative(b.x, grid, w)
    results = detect_batch(est, cfg.coefficients, b.x, grid, sc.detect.run_length)
    write_csv(out / schema.DETECTION_CSV, DETECTION_COLUMNS, detection_rows(b.path_ids, b.tau, results))
    verdicts = [r.verdict for r in results]
    counts = {v: verdicts.count(v) for v in ("switch", "none", "undetectable")}
    verdict = max(("switch", "none", "undetectable"), key=lambda v: counts[v])
    tol = 2 * w * grid.dt
    switched = np.isfinite(b.tau)
    hits = [abs(r.tau_hat - t) <= tol for r, t in zip(results, b.tau) if r.detected and np.isfinite(t)]
    within = float(np.mean(hits)) if hits else None
    quiet = [r.detected for r, s in zip(results, switched) if not s]
    fp = float(np.mean(quiet)) if quiet else None
    expected = sc.expected.get("detect")
    ok = expected is None or expected == verdict
    if verdict == "switch" and within is not None and within < 0.95:
        ok = False
    if fp is not None and verdict != "undetectable" and fp > 0.05:
        ok = False
    report = {
        "schema_version": schema.SCHEMA_VERSION,
        "fingerprint": output.fingerprint,
        "window": w,
        "run_length": sc.detect.run_length,
        "verdict": verdict,
        "counts": counts,
        "within_tolerance": within,
        "false_positive_rate": fp,
        "tolerance": _f(tol),
        "expected": expected,
        "match": ok,
    }
    write_json(out / schema.DETECTION_JSON, report)
    return ok, report


def stage_arbitrage(sc, output, out):
    b, grid = output.bundle, output.grid
    cfg = sc.config
    tag = cfg.filtration_tag
    mpr = market_price_of_risk(b, cfg.coefficients, tag, grid, cfg.tau_spec, cfg.rho.rho)
    na1 = na1_statistic(mpr, grid)
    ladder_rows = []
    for j, e in enumerate(na1.epsilons):
        col = na1.ladder[:, j] if len(na1.ladder) else np.zeros(1)
        ladder_rows.append([repr(float(e)), repr(float(np.median(col))), repr(float(np.quantile(col, 0.1))),
                            repr(float(np.quantile(col, 0.9)))])
    write_csv(out / schema.NA1_CSV, schema.NA1_COLUMNS, ladder_rows)
    deflator = None
    checkpoints = []
    mart_ok = None
    try:
        lam = np.nan_to_num(mpr.lam, nan=0.0)
        jump = None
        psi = sc.arbitrage.psi
        if psi and isinstance(cfg.tau_spec, (Cox, IndependentLaw)) and cfg.tau_window is None:
            jump = jump_martingale_for(cfg.tau_spec, b.tau, grid, b.w1, b.x)
        driver = compose_driver(b.w1, b.w2, b.tau, cfg.rho.rho, grid, b.w1_tau, b.w2_tau)
        z = build_deflator(lam, tag_brownian(driver, mpr, grid), grid, na1, psi if jump else None, jump)
        if len(b) >= 1000:
            cps = default_checkpoints(grid, sc.arbitrage.checkpoints)
            rep = deflated_price_test(b.s, z, grid, cps, sc.arbitrage.confidence)
            checkpoints = rep.test.rows()
            mart_ok = rep.verdict
            deflator = {"status": "tested", "ez_mean": _f(rep.ez_mean), "ez_se": _f(rep.ez_se),
                        "ez_ci": [_f(c) for c in rep.ez_ci], "pass": rep.verdict}
            write_csv(out / schema.CHECKPOINT_CSV, schema.CHECKPOINT_COLUMNS,
                      [[repr(r["t"]), repr(r["mean"]), repr(r["se"]), str(r["pass"]).lower()] for r in checkpoints])
        else:
            deflator = {"status": "untested: fewer than 1000 paths"}
    except ArbitrageDetectedError as exc:
        deflator = {"status": f"refused: {exc}"}
    shrink = shrinkage_consistency(b, cfg.coefficients, grid, cfg.tau_spec, tag)
    expected = sc.expected.get("arbitrage")
    ok = expected is None or expected == na1.verdict
    if expected is None and na1.verdict == DIVERGING:
        ok = False
    want_mart = sc.expected.get("martingale", True)
    if mart_ok is not None and mart_ok != want_mart:
        ok = False
    if shrink.checked and not shrink.passed:
        ok = False
    report = {
        "schema_version": schema.SCHEMA_VERSION,
        "fingerprint": output.fingerprint,
        "tag": tag.value,
        "na1": {
            "verdict": na1.verdict,
            "epsilons": [_f(e) for e in na1.epsilons],
            "median": [_f(m) for m in na1.median],
            "growth": [_f(g) for g in na1.growth],
            "stable_fraction": _f(na1.stable_fraction),
            "undefined_paths": na1.undefined_paths,
        },
        "deflator": deflator,
        "checkpoints": checkpoints,
        "shrinkage": {"checked": shrink.checked, "notice": shrink.notice, "violations": len(shrink.violations),
                      "verdict_G": shrink.verdict_g, "verdict_GX": shrink.verdict_gx},
        "expected": {"verdict": expected, "martingale": want_mart},
        "match": ok,
    }
    write_json(out / schema.ARBITRAGE_JSON, report)
    return ok, report


def stage_hedge(sc, output, out):
    cfg = sc.config
    hs = sc.hedge
    claim = CLAIMS[hs.claim](hs.params, cfg.filtration_tag)
    basis = BasisSpec(hs.basis_size, hs.basis)
    expected = sc.expected.get("hedge", "ok")
    base = {"schema_version": schema.SCHEMA_VERSION, "fingerprint": output.fingerprint,
            "tag": cfg.filtration_tag.value, "claim": claim.description, "expected": expected}
    try:
        data = prepare_hedge_data(output)
    except ArbitrageDetectedError as exc:
        report = dict(base, status="rejected", reason=str(exc), match=expected == "rejected")
        write_csv(out / schema.HEDGE_CSV, HEDGE_COLUMNS, [])
        write_json(out / schema.HEDGE_JSON, report)
        return report["match"], report
    P = len(data)
    n_train = max(1, min(P - 1, int(round(P * hs.train_fraction))))
    train, test = subset(data, slice(0, n_train)), subset(data, slice(n_train, P))
    hedge = regress_integrands(claim, train, basis, use_psi=True)
    rmse = replicate(claim, hedge, test).rmse
    rmse_b, gap = rmse, 0.0
    if hedge.use_psi:
        brown = regress_integrands(claim, train, basis, use_psi=False)
        rmse_b = replicate(claim, brown, test).rmse
        gap = rmse_b / rmse - 1.0 if rmse > 0 else (0.0 if rmse_b == 0 else math.inf)
    ladder = []
    for size in [s for s in HEDGE_LADDER if s < n_train] + [n_train]:
        h = hedge if size == n_train else regress_integrands(claim, subset(train, slice(0, size)), basis)
        ladder.append({"n_paths": int(size), "rmse": _f(replicate(claim, h, test).rmse)})
    write_csv(out / schema.HEDGE_CSV, HEDGE_COLUMNS, hedge_rows(hedge, train))
    ok = expected == "ok"
    if "hedge_rmse_max" in sc.expected and rmse > sc.expected["hedge_rmse_max"]:
        ok = False
    if "jump_gap_min" in sc.expected and gap < sc.expected["jump_gap_min"]:
        ok = False
    if "ablation_gap_max" in sc.expected and abs(gap) >= sc.expected["ablation_gap_max"]:
        ok = False
    v0 = hedge.v0 if not isinstance(hedge.v0, dict) else {str(k): _f(v) for k, v in sorted(hedge.v0.items())}
    report = dict(
        base,
        status="ok",
        v0=_f(v0) if isinstance(v0, float) else v0,
        rmse=_f(rmse),
        rmse_brownian=_f(rmse_b),
        ablation_gap=_f(gap),
        rmse_ladder=ladder,
        in_sample_rmse=_f(hedge.replication_rmse),
        match=ok,
    )
    write_json(out / schema.HEDGE_JSON, report)
    return ok, report


def stage_report(out):
    out = Path(out)
    missing = [s for s, files in schema.STAGE_OUTPUTS.items() if not all((out / f).exists() for f in files)]
    if missing:
        return missing
    summary = json.loads((out / schema.SUMMARY).read_text(encoding="utf-8"))
    det = json.loads((out / schema.DETECTION_JSON).read_text(encoding="utf-8"))
    arb = json.loads((out / schema.ARBITRAGE_JSON).read_text(encoding="utf-8"))
    hed = json.loads((out / schema.HEDGE_JSON).read_text(encoding="utf-8"))
    lines = [
        f"# Scenario {summary['scenario']}",
        "",
        f"Fingerprint `{summary['fingerprint'][:16]}`, {summary['n_paths']} paths, "
        f"{summary['n_steps']} steps on [0, {summary['horizon']}].",
        "",
        "| stage | verdict | matches expectation |",
        "|---|---|---|",
        f"| detect | {det['verdict']} | {det['match']} |",
        f"| arbitrage | {arb['na1']['verdict']} | {arb['match']} |",
        f"| hedge | {hed['status']} | {hed['match']} |",
        "",
        "## Terminal moments",
        "",
        f"- X_T mean {summary['x_T']['mean']}, std {summary['x_T']['std']}",
        f"- S_T mean {summary['s_T']['mean']}, std {summary['s_T']['std']}",
        f"- change points beyond the horizon: {summary['tau']['beyond_horizon']}",
        "",
        "## Integrated squared market price of risk",
        "",
        "| epsilon | median |",
        "|---|---|",
    ]
    lines += [f"| {e} | {m} |" for e, m in zip(arb["na1"]["epsilons"], arb["na1"]["median"])]
    d = arb.get("deflator") or {}
    lines += ["", f"Deflator: {d.get('status')}" + (f", E[Z_T] = {d['ez_mean']} ± {d['ez_se']}" if "ez_mean" in d else "")]
    if hed["status"] == "ok":
        lines += ["", "## Hedge", "", f"- claim: {hed['claim']}", f"- v0: {hed['v0']}",
                  f"- out-of-sample RMSE: {hed['rmse']} (without jump integrand: {hed['rmse_brownian']})"]
        write_csv(out / "rmse_ladder.csv", ("n_paths", "rmse"), [[r["n_paths"], r["rmse"]] for r in hed["rmse_ladder"]])
    (out / schema.REPORT_MD).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return []


# --------------------------------------------------------------------------
# driver


def _versions():
    out = {"schema": schema.SCHEMA_VERSION, "numpy": np.__version__}
    for pkg in ("artifact", "scipy"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="chgpt", description="Change-point model laboratory")
    p.add_argument("--scenario", help="scenario TOML file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--paths", type=int, help="override number of paths")
    p.add_argument("--steps", type=int, help="override number of time steps")
    p.add_argument("--seed", type=int, help="override master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="worker processes (default: CHGPT_WORKERS or 1)")
    p.add_argument("--dump-paths", action="store_true", help="write every path to paths.csv")
    p.add_argument("--stage", choices=STAGES + ("all",), default="all")
    return p


def run(argv=None, stream=sys.stderr):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    if args.stage == "report":
        if not out.is_dir():
            print(f"missing stages: {', '.join(schema.STAGE_OUTPUTS)}", file=stream)
            return EXIT_MISSING
        missing = stage_report(out)
        if missing:
            print(f"missing stages: {', '.join(missing)}", file=stream)
            return EXIT_MISSING
        return EXIT_OK
    if not args.scenario:
        print("--scenario is required for this stage", file=stream)
        return EXIT_SCHEMA
    try:
        sc = load_scenario(args.scenario, paths=args.paths, steps=args.steps, seed=args.seed)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=stream)
        return EXIT_SCHEMA
    out.mkdir(parents=True, exist_ok=True)
    workers = resolve_workers(args.workers)
    manifest = {
        "scenario_file": str(args.scenario),
        "config": describe(sc),
        "fingerprint": sc.config.fingerprint(),
        "versions": _versions(),
        "master_seed": int(sc.config.master_seed),
        "output_dir": str(out),
        "workers": workers,
        "stage": args.stage,
        "wall_clock": {},
    }
    write_json(out / schema.MANIFEST, manifest)
    stages = ("simulate", "detect", "arbitrage", "hedge", "report") if args.stage == "all" else (args.stage,)
    failures = []
    try:
        t0 = time.perf_counter()
        output = simulate_paths(sc.config, workers)
        manifest["wall_clock"]["simulate"] = time.perf_counter() - t0
        if args.dump_paths:
            write_paths_csv(output, out / schema.PATHS_CSV)
        runners = {"simulate": stage_simulate, "detect": stage_detect, "arbitrage": stage_arbitrage,
                   "hedge": stage_hedge}
        for name in stages:
            if name == "report":
                missing = stage_report(out)
                if missing:
                    print(f"missing stages: {', '.join(missing)}", file=stream)
                    return EXIT_MISSING
                continue
            t0 = time.perf_counter()
            ok, _ = runners[name](sc, output, out)
            manifest["wall_clock"][name] = manifest["wall_clock"].get(name, 0.0) + time.perf_counter() - t0
            if not ok:
                failures.append(name)
    except (UnsupportedScenarioError, PathInconsistencyError) as exc:
        print(f"scenario error: {exc}", file=stream)
        return EXIT_SCHEMA
    except (NumericalOverflowError, SingularHazardError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=stream)
        return EXIT_NUMERIC
    finally:
        write_json(out / schema.MANIFEST, manifest)
    if failures:
        print(f"verification failed: {', '.join(failures)}", file=stream)
        return EXIT_VERIFY
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
