"""
Ablation matrices: train and evaluate one detector per combination of
axis values and collect the results in one CSV table.
"""

from __future__ import annotations

import itertools
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd
from joblib import Parallel, delayed

from src.config.settings import DetectorConfig, apply_overrides
from src.models.errors import ConfigError
from src.services.evaluation import evaluate_detector, gathering_distances
from src.workers.trainer import build_datasets, train

logger = logging.getLogger(__name__)

Overrides = Dict[str, Any]


def _proposals(start: int, end: int, mode: str) -> Overrides:
    return {
        "schedule.proposals_start": start,
        "schedule.proposals_end": end,
        "schedule.mode": mode,
    }


# axis -> row label -> config overrides
AXES: Dict[str, Dict[str, Overrides]] = {
    "init": {
        name: {"heads.init": name}
        for name in ("dense", "learnable", "grid", "center", "border")
    },
    "decoders": {str(n): {"model.decoder_layers": n} for n in (1, 2, 3)},
    "encoders": {str(n): {"model.encoder_layers": n} for n in (1, 3, 6)},
    "proposals": {
        "fixed-20": _proposals(20, 20, "fixed"),
        "fixed-60": _proposals(60, 60, "fixed"),
        "60->20": _proposals(60, 20, "linear"),
    },
    "schedule_mode": {
        mode: {"schedule.mode": mode} for mode in ("linear", "fixed")
    },
    "assign": {str(n): {"loss.assign_n": n} for n in (1, 5, 10)},
    "ref": {ref: {"heads.ref": ref} for ref in ("4d", "2d")},
    "query_init": {
        mode: {"heads.query_init": mode} for mode in ("dense", "learned")
    },
    "objectness": {
        mode: {"heads.objectness": mode} for mode in ("specific", "agnostic")
    },
    "share_head": {
        str(flag).lower(): {"heads.share_head": flag} for flag in (True, False)
    },
    "aux_loss": {str(flag).lower(): {"loss.aux_loss": flag} for flag in (True, False)},
}

METRIC_COLUMNS = (
    "ap50",
    "ap75",
    "map",
    "recall",
    "final_loss",
    "center_dist_init",
    "center_dist_final",
)


def ablation_entries(axes: Sequence[str]) -> List[Tuple[Dict[str, str], Overrides]]:
    """
    Cartesian product of the named axes, in axis and row order.

    Returns:
        ``(labels, overrides)`` per entry, ``labels`` mapping axis to row
        label.

    Raises:
        ConfigError: for unknown or repeated axes.
    """
    unknown = [axis for axis in axes if axis not in AXES]
    if unknown:
        raise ConfigError(
            f"unknown ablation axes: {', '.join(unknown)}; "
            f"expected any of {', '.join(AXES)}"
        )
    if len(set(axes)) != len(axes):
        raise ConfigError(f"repeated ablation axis in {list(axes)}")
    if not axes:
        raise ConfigError("at least one ablation axis is required")

    entries = []
    for combo in itertools.product(*(AXES[axis].items() for axis in axes)):
        labels: Dict[str, str] = {}
        overrides: Overrides = {}
        for axis, (label, values) in zip(axes, combo):
            labels[axis] = label
            overrides.update(values)
        entries.append((labels, overrides))
    return entries


def _slug(labels: Mapping[str, str]) -> str:
    text = "_".join(f"{axis}={label}" for axis, label in labels.items())
    return re.sub(r"[^A-Za-z0-9=_.-]+", "-", text)


def run_entry(
    config: DetectorConfig,
    labels: Mapping[str, str],
    overrides: Overrides,
    output_dir: str | Path,
) -> Dict[str, Any]:
    """
    Train and evaluate one ablation entry; returns its table row.
    """
    entry_config = apply_overrides(config, overrides)
    train_samples, eval_samples = build_datasets(entry_config)
    result = train(
        entry_config,
        Path(output_dir) / _slug(labels),
        train_samples=train_samples,
        eval_samples=[],
    )
    k = entry_config.schedule.proposals_end
    row: Dict[str, Any] = dict(labels)
    if eval_samples:
        row.update(evaluate_detector(result.model, eval_samples, k))
        init, final = gathering_distances(result.model, eval_samples, k)
    else:
        row.update({"ap50": None, "ap75": None, "map": None, "recall": None})
        init = final = None
    row["final_loss"] = result.final_loss
    row["center_dist_init"] = init
    row["center_dist_final"] = final
    logger.info("Ablation entry %s: ap50=%s", dict(labels), row["ap50"])
    return row


def run_ablation(
    config: DetectorConfig,
    axes: Sequence[str],
    output_dir: str | Path,
    n_jobs: int = 1,
    table_name: str = "ablation.csv",
) -> Tuple[pd.DataFrame, Path]:
    """
    Run every entry of the axes' Cartesian product and write the table.

    Entries run in ``n_jobs`` joblib worker processes; row order follows
    ``ablation_entries`` regardless of completion order.
    """
    entries = ablation_entries(axes)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Running %d ablation entries on %d workers", len(entries), n_jobs)
    rows = Parallel(n_jobs=n_jobs)(
        delayed(run_entry)(config, labels, overrides, output_dir)
        for labels, overrides in entries
    )
    table = pd.DataFrame(rows, columns=list(axes) + list(METRIC_COLUMNS))
    path = output_dir / table_name
    table.to_csv(path, index=False)
    logger.info("Wrote ablation table to %s", path)
    return table, path


def parse_axes(values: Optional[Sequence[str]]) -> List[str]:
    """
    Flatten ``--axis`` values; each may hold a comma-separated list.
    """
    axes: List[str] = []
    for value in values or []:
        axes.extend(part.strip() for part in value.split(",") if part.strip())
    return axes


__all__ = [
    "AXES",
    "METRIC_COLUMNS",
    "ablation_entries",
    "parse_axes",
    "run_ablation",
    "run_entry",
]
