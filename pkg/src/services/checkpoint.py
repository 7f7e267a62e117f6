"""
Checkpoint bundles: the detector's configuration plus every named
parameter, persisted with joblib.
"""

from __future__ import annotations

import logging
from pathlib import Path

import joblib
import numpy as np

from src.config.settings import config_from_dict
from src.models.errors import ParseError, ShapeError
from src.services.detector import EfficientDetector
from version import get_version

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(model: EfficientDetector, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bundle = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "package_version": get_version(),
        "config": model.config.to_dict(),
        "params": {
            name: {"shape": list(p.shape), "data": p.data.copy()}
            for name, p in model.named_parameters()
        },
    }
    joblib.dump(bundle, path)
    logger.info("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path: str | Path) -> EfficientDetector:
    """
    Rebuild a detector from a checkpoint bundle.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        ParseError: if the bundle is not a checkpoint of a supported version.
        ShapeError: if parameter names or shapes do not fit the stored config.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        bundle = joblib.load(path)
    except Exception as exc:
        logger.exception("Failed to load checkpoint from %s", path)
        raise ParseError(f"unreadable checkpoint: {exc}", path=str(path)) from exc
    if not isinstance(bundle, dict) or "params" not in bundle:
        raise ParseError("not a detector checkpoint", path=str(path))
    version = bundle.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ParseError(
            f"unsupported checkpoint format_version {version!r}", path=str(path)
        )

    model = EfficientDetector(config_from_dict(bundle["config"]))
    state = {}
    for name, entry in bundle["params"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        if list(data.shape) != list(entry["shape"]):
            raise ShapeError(
                f"{name}: stored shape {entry['shape']} but data is {data.shape}"
            )
        state[name] = data
    model.load_state_dict(state)
    logger.debug(
        "Loaded %d parameters from %s (written by %s)",
        len(state),
        path,
        bundle.get("package_version", "unknown"),
    )
    return model


__all__ = ["CHECKPOINT_FORMAT_VERSION", "load_checkpoint", "save_checkpoint"]
