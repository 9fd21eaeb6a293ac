"""Frozen names of every file, CSV column and JSON key the CLI writes.

Bump ``SCHEMA_VERSION`` on any breaking change to these.
"""

from .engine import PATH_COLUMNS
from .filtration import DETECTION_COLUMNS
from .hedging import HEDGE_COLUMNS

SCHEMA_VERSION = 1

MANIFEST = "manifest.json"
SUMMARY = "summary.json"
PATHS_CSV = "paths.csv"
DETECTION_CSV = "detection.csv"
DETECTION_JSON = "detection.json"
ARBITRAGE_JSON = "arbitrage.json"
NA1_CSV = "na1_ladder.csv"
CHECKPOINT_CSV = "checkpoints.csv"
HEDGE_CSV = "hedge.csv"
HEDGE_JSON = "hedge.json"
REPORT_MD = "report.md"

# stage name -> files whose presence marks the stage as done
STAGE_OUTPUTS = {
    "simulate": (SUMMARY,),
    "detect": (DETECTION_CSV, DETECTION_JSON),
    "arbitrage": (ARBITRAGE_JSON,),
    "hedge": (HEDGE_CSV, HEDGE_JSON),
}

SUMMARY_KEYS = ("schema_version", "scenario", "fingerprint", "n_paths", "n_steps", "horizon", "x_T", "s_T", "tau")
DETECTION_KEYS = ("schema_version", "fingerprint", "window", "run_length", "verdict", "counts",
                  "within_tolerance", "false_positive_rate", "tolerance", "expected", "match")
ARBITRAGE_KEYS = ("schema_version", "fingerprint", "tag", "na1", "deflator", "checkpoints",
                  "shrinkage", "expected", "match")
HEDGE_KEYS = ("schema_version", "fingerprint", "tag", "claim", "status", "v0", "rmse", "rmse_brownian",
              "ablation_gap", "rmse_ladder", "in_sample_rmse", "expected", "match")

NA1_COLUMNS = ("epsilon", "median", "q10", "q90")
CHECKPOINT_COLUMNS = ("t", "mean", "se", "pass")

__all__ = [name for name in dir() if name.isupper()]
