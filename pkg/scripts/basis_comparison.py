"""Digital-claim hedge error by regression basis against the exact-delta floor.

The identical-volatility scenario has a common volatility, so the exact hedge
of ``1{X_T > 0}`` is known in closed form when the drift is zero; its discrete
replication error is the time-discretization floor for any regression basis.
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.stats import norm

from chgpt.engine import simulate_paths
from chgpt.hedging import BasisSpec, digital_claim, prepare_hedge_data, regress_integrands, replicate, subset
from chgpt.scenario import load_scenario

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "identical_vol.toml"


def exact_delta_floor(sigma, n_steps, paths, seed):
    rng = np.random.default_rng(seed)
    dt = 1.0 / n_steps
    x = np.zeros(paths)
    wealth = np.full(paths, 0.5)
    for k in range(n_steps):
        sd = sigma * np.sqrt(1.0 - k * dt)
        dx = sigma * np.sqrt(dt) * rng.standard_normal(paths)
        wealth += norm.pdf(x / sd) / sd * dx
        x += dx
    return float(np.sqrt(np.mean(((x > 0) - wealth) ** 2)))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, nargs="+", default=[128, 256])
    p.add_argument("--train", type=int, default=30_000)
    p.add_argument("--test", type=int, default=10_000)
    args = p.parse_args()
    bases = (BasisSpec(4), BasisSpec(6), BasisSpec(12, "hat"), BasisSpec(24, "hat"))
    claim = digital_claim()
    for n in args.steps:
        sc = load_scenario(SCENARIO, paths=args.train + args.test, steps=n)
        data = prepare_hedge_data(simulate_paths(sc.config))
        train, test = subset(data, slice(0, args.train)), subset(data, slice(args.train, None))
        cells = [f"floor {exact_delta_floor(0.3, n, 20_000, 0):.4f}"]
        for b in bases:
            rmse = replicate(claim, regress_integrands(claim, train, b), test).rmse
            cells.append(f"{b.kind}{b.size} {rmse:.4f}")
        print(f"n={n:5d}  " + "  ".join(cells))


if __name__ == "__main__":
    main()
