"""Run the CLI pipeline over every scenario file and tabulate exit codes."""

import argparse
import json
import tempfile
from pathlib import Path

from chgpt.cli import run

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenarios", default=str(ROOT / "scenarios"))
    p.add_argument("--out", help="keep outputs here instead of a temporary directory")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    base = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="chgpt-"))
    for path in sorted(Path(args.scenarios).glob("*.toml")):
        out = base / path.stem
        code = run(["--scenario", str(path), "--out", str(out), "--workers", str(args.workers)])
        line = f"{path.stem:28s} exit {code}"
        hedge = out / "hedge.json"
        if hedge.exists():
            h = json.loads(hedge.read_text())
            line += f"  hedge {h['status']}  rmse {h['rmse']}  ablation gap {h['ablation_gap']}"
        print(line)
    print(f"outputs in {base}")


if __name__ == "__main__":
    main()
