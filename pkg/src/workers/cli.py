"""
Command-line entry point.

Subcommands: ``train``, ``eval``, ``ablate``, ``viz`` and ``gen-data``.
Failures end with a non-zero status and one JSON line on stderr:
``{"error": "<ClassName>", "message": "..."}``; status 2 for usage
mistakes, detector errors and missing files, 1 for anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

from src.config import apply_overrides, get_settings, load_config
from src.config.settings import DetectorConfig
from src.models.errors import ConfigError, DetectorError
from src.services.checkpoint import load_checkpoint
from src.services.data_pipeline import (
    SHAPE_NAMES,
    dump_coco,
    generate_shapes,
    load_coco_annotations,
    load_image,
)
from src.services.evaluation import evaluate_detector
from src.services.visualization import STAGES, emit_reference_points
from src.workers.ablation import AXES, parse_axes, run_ablation
from src.workers.trainer import build_datasets, train
from version import get_version

logger = logging.getLogger(__name__)


def _parse_value(text: str) -> Any:
    """
    ``--set`` values: JSON scalars where they parse, strings otherwise.
    """
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: Optional[Sequence[str]]) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got '{pair}'")
        result[key.strip()] = _parse_value(value.strip())
    return result


def _config(args: argparse.Namespace) -> DetectorConfig:
    config = load_config(args.config)
    overrides = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    return apply_overrides(config, overrides) if overrides else config


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    output_dir = Path(args.output_dir or get_settings().output_dir)
    result = train(config, output_dir)
    _emit(
        {
            "checkpoint": str(result.checkpoint_path),
            "metrics": str(result.metrics_path),
            "final": result.records[-1],
        }
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    image_size = model.config.data.image_size
    if args.data:
        dataset = load_coco_annotations(args.data)
        samples = dataset.load_samples(args.image_root, image_size)
    else:
        _, samples = build_datasets(model.config)
    metrics = evaluate_detector(model, samples, args.k)
    _emit(metrics)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args)
    settings = get_settings()
    output_dir = Path(args.output_dir or settings.output_dir) / "ablation"
    _, path = run_ablation(
        config,
        parse_axes(args.axis),
        output_dir,
        n_jobs=args.workers or settings.num_workers,
    )
    _emit({"table": str(path)})
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.image:
        image = load_image(args.image, model.config.data.image_size)
    else:
        _, samples = build_datasets(model.config)
        if not 0 <= args.sample_index < len(samples):
            raise ConfigError(
                f"sample index {args.sample_index} outside 0..{len(samples) - 1}"
            )
        image = samples[args.sample_index].pixels
    svg = emit_reference_points(
        model,
        image,
        stage=args.stage,
        k=args.k,
        embed_image=args.embed_image,
        size=args.size,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    _emit({"svg": str(out), "stage": args.stage})
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    samples = generate_shapes(
        args.seed, args.count, args.image_size, args.max_objects, args.num_classes
    )
    path = dump_coco(samples, args.out, SHAPE_NAMES[: args.num_classes])
    _emit({"annotations": str(path), "images": len(samples)})
    return 0


class UsageError(DetectorError):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    """
    Raises ``UsageError`` instead of printing usage and exiting; subparsers
    inherit the class.
    """

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="edetr", description="Dense-prior end-to-end object detector."
    )
    parser.add_argument("--version", action="version", version=get_version())
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI configuration file.")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="Override one config value; may be repeated.",
        )
        p.add_argument("--output-dir", help="Defaults to EDETR_OUTPUT_DIR.")

    p = sub.add_parser("train", help="Train a detector.")
    with_config(p)
    p.add_argument("--seed", type=int, help="Overrides train.seed.")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--data",
        help="COCO-style annotation file; defaults to the checkpoint's "
        "evaluation split.",
    )
    p.add_argument("--image-root", help="Defaults to the annotation directory.")
    p.add_argument("--k", type=int, help="Proposal count.")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="Run an ablation matrix.")
    with_config(p)
    p.add_argument(
        "--axis",
        action="append",
        required=True,
        help=f"One of {', '.join(AXES)}; repeat for a Cartesian product.",
    )
    p.add_argument("--workers", type=int, help="Defaults to EDETR_NUM_WORKERS.")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("viz", help="Render container reference points as SVG.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="Image file; defaults to an evaluation sample.")
    p.add_argument("--sample-index", type=int, default=0)
    p.add_argument("--stage", choices=STAGES, default="all")
    p.add_argument("--k", type=int, help="Proposal count.")
    p.add_argument("--embed-image", action="store_true")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--out", required=True, help="SVG output path.")
    p.set_defaults(handler=cmd_viz)

    p = sub.add_parser("gen-data", help="Write a synthetic dataset as COCO.")
    p.add_argument("--out", required=True, help="Output directory.")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--num-classes", type=int, default=3)
    p.set_defaults(handler=cmd_gen_data)
    return parser


def _fail(exc: BaseException) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _fail(exc)
        return 2
    try:
        return args.handler(args)
    except (DetectorError, FileNotFoundError) as exc:
        _fail(exc)
        return 2
    except Exception as exc:
        logger.exception("Command %s failed", args.command)
        _fail(exc)
        return 1


if __name__ == "__main__":
    logging.basicConfig(level=get_settings().log_level)
    sys.exit(main())
