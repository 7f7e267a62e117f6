"""
Training loop for the detector.

One optimizer step per batch: per-image set losses are back-propagated in
index order with weight ``1 / batch_size``, then AdamW updates every
parameter that received a gradient. Each epoch appends one JSON line to
``metrics.jsonl``; the final parameters are saved as a joblib bundle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.config.settings import DetectorConfig, TrainConfig
from src.models.detection import ImageSample
from src.models.errors import ConfigError, NumericError, ShapeError
from src.services.checkpoint import save_checkpoint
from src.services.data_pipeline import (
    epoch_order,
    generate_shapes,
    load_coco_annotations,
)
from src.services.dense_sparse_heads import proposals_at
from src.services.detector import DetectorOutput, EfficientDetector
from src.services.evaluation import evaluate_detector
from src.services.layers import Parameter
from src.services.matching_loss import LossWeights, set_loss

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.joblib"
METRICS_NAME = "metrics.jsonl"
EVAL_SEED_OFFSET = 10_000


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #


@dataclass
class AdamState:
    """
    Step counter plus first and second moment estimates keyed by parameter
    name.
    """

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> AdamState:
    """
    One AdamW update with decoupled weight decay and bias-corrected moments.

    Parameters whose gradient is None are left untouched and keep their
    moments.

    Returns:
        The new optimizer state; parameters are updated in place.

    Raises:
        ShapeError: if a gradient does not match its parameter's shape.
    """
    beta1, beta2 = betas
    step = state.step + 1
    m = dict(state.m)
    v = dict(state.v)
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(
                f"gradient for {name} has shape {grad.shape}, "
                f"parameter has {param.shape}"
            )
        m[name] = beta1 * m.get(name, 0.0) + (1.0 - beta1) * grad
        v[name] = beta2 * v.get(name, 0.0) + (1.0 - beta2) * grad * grad
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        decayed = param.data * (1.0 - lr * weight_decay)
        param.assign(decayed - lr * m_hat / (np.sqrt(v_hat) + eps))
    return AdamState(step=step, m=m, v=v)


def clip_grad_norm(
    grads: Mapping[str, Optional[np.ndarray]], max_norm: float
) -> Dict[str, Optional[np.ndarray]]:
    """
    Scale all gradients together so their global L2 norm is at most
    ``max_norm``.
    """
    present = [g for g in grads.values() if g is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in present)))
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {
        name: None if g is None else g * scale for name, g in grads.items()
    }


def lr_at(config: TrainConfig, epoch: int) -> float:
    if epoch >= config.lr_drop_epoch:
        return config.lr * config.lr_drop_factor
    return config.lr


# --------------------------------------------------------------------------- #
# Steps and epochs
# --------------------------------------------------------------------------- #


def _first_non_finite(
    named: Iterable[Tuple[str, Optional[np.ndarray]]]
) -> Optional[str]:
    for name, values in named:
        if values is not None and not np.all(np.isfinite(values)):
            return name
    return None


def _output_tensors(output: DetectorOutput) -> List[Tuple[str, np.ndarray]]:
    named = [
        ("memory.features", output.memory.features.data),
        ("dense.logits", output.dense.logits.data),
        ("dense.boxes", output.dense.boxes.data),
        ("containers.queries", output.containers.queries.data),
        ("containers.references", output.containers.references.data),
    ]
    for index, layer in enumerate(output.layers):
        named.append((f"layers.{index}.logits", layer.logits.data))
        named.append((f"layers.{index}.boxes", layer.boxes.data))
    return named


def train_step(
    model: EfficientDetector,
    batch: Sequence[ImageSample],
    k: int,
    weights: LossWeights,
    state: AdamState,
    lr: float,
    config: TrainConfig,
) -> Tuple[Dict[str, float], AdamState]:
    """
    Accumulate gradients over ``batch`` and take one optimizer step.

    Returns:
        Batch-averaged loss terms (``loss_total`` plus the set-loss terms)
        with ``k_proposals``, the largest container count the model used,
        and the new optimizer state.

    Raises:
        NumericError: when the loss or a gradient is not finite; the message
            names the first non-finite tensor.
    """
    model.zero_grad()
    scale = 1.0 / len(batch)
    terms: Dict[str, float] = {"loss_total": 0.0}
    used = 0
    for sample in batch:
        output = model(sample.pixels, k)
        used = max(used, len(output.containers))
        culprit = _first_non_finite(_output_tensors(output))
        if culprit is None:
            breakdown = set_loss(output.layers, output.dense, sample.truth, weights)
            if not np.isfinite(breakdown.total.data).all():
                culprit = _first_non_finite(
                    (name, p.data) for name, p in model.named_parameters()
                )
                culprit = culprit or "loss"
        if culprit is not None:
            raise NumericError(
                f"non-finite loss on {sample.id}; first non-finite tensor: "
                f"{culprit}"
            )
        (breakdown.total * scale).backward()
        terms["loss_total"] += breakdown.total.item() * scale
        for key, value in breakdown.terms.items():
            terms[key] = terms.get(key, 0.0) + value * scale
    terms["k_proposals"] = used

    params = dict(model.named_parameters())
    grads = {name: p.grad for name, p in params.items()}
    culprit = _first_non_finite((f"{name}.grad", g) for name, g in grads.items())
    if culprit is not None:
        raise NumericError(f"non-finite gradient: {culprit}")
    if config.max_grad_norm > 0:
        grads = clip_grad_norm(grads, config.max_grad_norm)
    state = adam_step(
        params,
        grads,
        state,
        lr,
        (config.beta1, config.beta2),
        config.weight_decay,
        config.eps,
    )
    logger.debug("step %d loss %.6f", state.step, terms["loss_total"])
    return terms, state


def train_epoch(
    model: EfficientDetector,
    samples: Sequence[ImageSample],
    epoch: int,
    state: AdamState,
    config: DetectorConfig,
) -> Tuple[Dict[str, float], AdamState, int]:
    """
    One pass over ``samples`` in the epoch's shuffled order.

    Returns:
        Step-averaged loss terms, the optimizer state and the proposal count
        the model actually used, which is below the scheduled count when the
        dense strategy runs out of encoder tokens.
    """
    train_cfg = config.train
    k = proposals_at(config.schedule, epoch, train_cfg.epochs)
    lr = lr_at(train_cfg, epoch)
    order = epoch_order(len(samples), train_cfg.seed, epoch)
    sums: Dict[str, float] = {}
    steps = 0
    used = 0
    for start in range(0, len(order), train_cfg.batch_size):
        batch = [samples[i] for i in order[start : start + train_cfg.batch_size]]
        terms, state = train_step(model, batch, k, config.loss, state, lr, train_cfg)
        used = max(used, int(terms.pop("k_proposals")))
        for key, value in terms.items():
            sums[key] = sums.get(key, 0.0) + value
        steps += 1
    averages = {key: value / max(steps, 1) for key, value in sums.items()}
    if used < k:
        logger.warning(
            "epoch %d scheduled %d proposals but only %d fit the encoder tokens",
            epoch,
            k,
            used,
        )
    return averages, state, used


# --------------------------------------------------------------------------- #
# Data
# --------------------------------------------------------------------------- #


def build_datasets(
    config: DetectorConfig,
) -> Tuple[List[ImageSample], List[ImageSample]]:
    """
    Training and evaluation samples for the configured data source.

    Raises:
        ConfigError: if the dataset uses more classes than the model predicts.
        ParseError: for unreadable COCO annotation files.
    """
    data = config.data
    num_classes = config.model.num_classes
    if data.source == "synthetic":
        train_samples = generate_shapes(
            data.seed, data.train_count, data.image_size, data.max_objects, num_classes
        )
        eval_samples = generate_shapes(
            data.seed + EVAL_SEED_OFFSET,
            data.eval_count,
            data.image_size,
            data.max_objects,
            num_classes,
        )
    else:
        train_set = load_coco_annotations(data.coco_train)
        if train_set.num_classes > num_classes:
            raise ConfigError(
                f"{data.coco_train} has {train_set.num_classes} categories, "
                f"model.num_classes is {num_classes}"
            )
        train_samples = train_set.load_samples(image_size=data.image_size)
        eval_samples = []
        if data.coco_eval:
            eval_samples = load_coco_annotations(data.coco_eval).load_samples(
                image_size=data.image_size
            )
    logger.info(
        "Loaded %d training and %d evaluation images (%s)",
        len(train_samples),
        len(eval_samples),
        data.source,
    )
    return train_samples, eval_samples


# --------------------------------------------------------------------------- #
# Run
# --------------------------------------------------------------------------- #


@dataclass
class TrainResult:
    model: EfficientDetector
    records: List[Dict[str, object]]
    checkpoint_path: Path
    metrics_path: Path

    @property
    def final_loss(self) -> float:
        return float(self.records[-1]["loss_total"])


def train(
    config: DetectorConfig,
    output_dir: str | Path,
    train_samples: Optional[Sequence[ImageSample]] = None,
    eval_samples: Optional[Sequence[ImageSample]] = None,
) -> TrainResult:
    """
    Train a detector from scratch and write its metrics log and checkpoint
    into ``output_dir``.

    Samples default to the configured data source. Every epoch is evaluated
    at ``proposals_end`` proposals; ``ap50_eval`` is null without evaluation
    samples.
    """
    if train_samples is None or eval_samples is None:
        built_train, built_eval = build_datasets(config)
        train_samples = built_train if train_samples is None else train_samples
        eval_samples = built_eval if eval_samples is None else eval_samples
    if not train_samples:
        raise ConfigError("no training samples")

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = output_dir / METRICS_NAME
    model = EfficientDetector(config, np.random.default_rng(config.train.seed))
    state = AdamState()
    records: List[Dict[str, object]] = []

    with metrics_path.open("w", encoding="utf-8") as log:
        for epoch in range(config.train.epochs):
            terms, state, k = train_epoch(model, train_samples, epoch, state, config)
            ap50 = None
            if eval_samples:
                metrics = evaluate_detector(
                    model, eval_samples, config.schedule.proposals_end
                )
                ap50 = metrics["ap50"]
            record: Dict[str, object] = {
                "epoch": epoch,
                "k_proposals": k,
                "lr": lr_at(config.train, epoch),
                "loss_total": terms["loss_total"],
                "loss_cls": terms.get("loss_cls", 0.0),
                "loss_l1": terms.get("loss_l1", 0.0),
                "loss_giou": terms.get("loss_giou", 0.0),
                "ap50_eval": ap50,
            }
            if "loss_objectness" in terms:
                record["loss_objectness"] = terms["loss_objectness"]
            log.write(json.dumps(record) + "\n")
            log.flush()
            records.append(record)
            logger.info(
                "epoch %d/%d k=%d loss=%.4f ap50=%s",
                epoch + 1,
                config.train.epochs,
                k,
                terms["loss_total"],
                "n/a" if ap50 is None else f"{ap50:.4f}",
            )

    checkpoint_path = save_checkpoint(model, output_dir / CHECKPOINT_NAME)
    return TrainResult(
        model=model,
        records=records,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
    )


__all__ = [
    "AdamState",
    "TrainResult",
    "adam_step",
    "build_datasets",
    "clip_grad_norm",
    "lr_at",
    "train",
    "train_epoch",
    "train_step",
]
