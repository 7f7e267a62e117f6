"""
Check the expected ablation directions on the synthetic-shapes benchmark.

This script:
1. Runs (or re-reads) the ``init`` and ``assign`` ablation tables.
2. Checks that dense initialization beats learnable references, that
   center initialization is the weakest, and that one-to-one assignment in
   the dense part is at least as good as 1-to-10.
3. Checks that reference centers move toward ground-truth centers during
   decoding for the dense-initialized model.
4. Exits with non-zero status if any direction is violated.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List

import pandas as pd

from src.config import get_settings, load_config
from src.workers.ablation import run_ablation


def _row(table: pd.DataFrame, axis: str, label: str) -> pd.Series:
    rows = table[table[axis].astype(str) == label]
    if rows.empty:
        raise KeyError(f"{axis}={label} missing from ablation table")
    return rows.iloc[0]


def check_init(table: pd.DataFrame) -> List[str]:
    failures = []
    ap = {
        label: float(_row(table, "init", label)["ap50"])
        for label in ("dense", "learnable", "grid", "center")
    }
    if not ap["dense"] > ap["learnable"]:
        failures.append(
            f"init: dense AP50 {ap['dense']:.4f} not above "
            f"learnable {ap['learnable']:.4f}"
        )
    if ap["center"] > min(ap.values()):
        failures.append(
            f"init: center AP50 {ap['center']:.4f} is not the lowest of {ap}"
        )
    dense = _row(table, "init", "dense")
    if not dense["center_dist_final"] < dense["center_dist_init"]:
        failures.append(
            "init: dense references did not move toward object centers "
            f"({dense['center_dist_init']:.4f} -> {dense['center_dist_final']:.4f})"
        )
    return failures


def check_assign(table: pd.DataFrame) -> List[str]:
    one = float(_row(table, "assign", "1")["ap50"])
    ten = float(_row(table, "assign", "10")["ap50"])
    if one < ten:
        return [f"assign: 1-to-1 AP50 {one:.4f} below 1-to-10 {ten:.4f}"]
    return []


def main(config_path: str, output_dir: str, workers: int, reuse: bool) -> None:
    output = Path(output_dir)
    tables = {}
    for axis in ("init", "assign"):
        path = output / axis / "ablation.csv"
        if reuse and path.is_file():
            tables[axis] = pd.read_csv(path)
            continue
        config = load_config(config_path)
        tables[axis], _ = run_ablation(config, [axis], output / axis, workers)

    print(tables["init"].to_string(index=False))
    print(tables["assign"].to_string(index=False))

    failures = check_init(tables["init"]) + check_assign(tables["assign"])
    if failures:
        for failure in failures:
            print(failure, file=sys.stderr)
        sys.exit(1)
    print("All ablation directions hold.")


if __name__ == "__main__":
    settings = get_settings()
    logging.basicConfig(level=settings.log_level)
    parser = argparse.ArgumentParser()
    parser.add_argument(
        "--config",
        default="configs/desk.ini",
        help="Benchmark configuration file.",
    )
    parser.add_argument(
        "--output-dir",
        default=str(Path(settings.output_dir) / "directions"),
        help="Directory for ablation runs and tables.",
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=settings.num_workers,
        help="Parallel ablation entries.",
    )
    parser.add_argument(
        "--reuse",
        action="store_true",
        help="Re-read existing tables instead of training again.",
    )
    args = parser.parse_args()
    main(args.config, args.output_dir, args.workers, args.reuse)
