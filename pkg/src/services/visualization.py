"""
SVG rendering of container reference points.

Shows where the decoder's object containers sit before decoding and after
each decoder layer, drawn over the input image or its frame. Reference
centers gather on foreground objects as a model trains.
"""

from __future__ import annotations

import base64
import io
import logging
from typing import List, Optional, Tuple, Union

import numpy as np
from lxml import etree
from PIL import Image

from src.models.errors import ConfigError
from src.services.checkpoint import load_checkpoint
from src.services.detector import DetectorOutput, EfficientDetector
from src.services.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SVG_NS = "http://www.w3.org/2000/svg"
XLINK_NS = "http://www.w3.org/1999/xlink"
STAGES = ("init", "per-layer", "final", "all")

# init first, then one color per decoder layer (cycled).
STAGE_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def reference_stages(output: DetectorOutput) -> List[Tuple[str, np.ndarray]]:
    """
    ``[("init", refs), ("layer-1", boxes), ..., ("layer-L", boxes)]`` where
    ``refs`` are the initial container references and ``boxes`` each decoder
    layer's refined boxes.
    """
    stages = [("init", output.containers.references.data.copy())]
    for index, layer in enumerate(output.layers, start=1):
        stages.append((f"layer-{index}", layer.boxes.data.copy()))
    return stages


def _select(
    stages: List[Tuple[str, np.ndarray]], stage: str
) -> List[Tuple[str, np.ndarray]]:
    if stage == "init":
        return stages[:1]
    if stage == "final":
        return stages[-1:]
    if stage == "per-layer":
        return stages[1:]
    if stage == "all":
        return stages
    raise ConfigError(f"unknown stage '{stage}'; expected one of {STAGES}")


def _png_data_uri(image: Tensor) -> str:
    raster = np.transpose(np.clip(image.data, 0.0, 1.0), (1, 2, 0))
    buffer = io.BytesIO()
    Image.fromarray(np.round(raster * 255.0).astype(np.uint8)).save(
        buffer, format="PNG"
    )
    return "data:image/png;base64," + base64.b64encode(buffer.getvalue()).decode()


def _fmt(value: float) -> str:
    return f"{value:.3f}"


def render_svg(
    stages: List[Tuple[str, np.ndarray]],
    image: Optional[Tensor] = None,
    size: int = 256,
    draw_boxes: bool = False,
) -> str:
    """
    One ``<g>`` per stage holding a circle per reference center, plus a
    rectangle per box when ``draw_boxes`` is set. With ``image`` the raster
    is embedded as a PNG data URI; otherwise only its frame is drawn.
    """
    nsmap = {None: SVG_NS, "xlink": XLINK_NS}
    root = etree.Element(
        f"{{{SVG_NS}}}svg",
        nsmap=nsmap,
        width=str(size),
        height=str(size),
        viewBox=f"0 0 {size} {size}",
    )
    if image is not None:
        etree.SubElement(
            root,
            f"{{{SVG_NS}}}image",
            {
                "x": "0",
                "y": "0",
                "width": str(size),
                "height": str(size),
                f"{{{XLINK_NS}}}href": _png_data_uri(image),
            },
        )
    else:
        etree.SubElement(
            root,
            f"{{{SVG_NS}}}rect",
            x="0",
            y="0",
            width=str(size),
            height=str(size),
            fill="none",
            stroke="#000000",
            **{"class": "frame"},
        )

    for position, (label, refs) in enumerate(stages):
        color = STAGE_COLORS[position % len(STAGE_COLORS)]
        group = etree.SubElement(
            root, f"{{{SVG_NS}}}g", id=label, stroke=color, fill=color
        )
        for ref in refs:
            cx, cy = ref[0] * size, ref[1] * size
            etree.SubElement(
                group,
                f"{{{SVG_NS}}}circle",
                cx=_fmt(cx),
                cy=_fmt(cy),
                r="2",
            )
            if draw_boxes and len(ref) == 4:
                w, h = ref[2] * size, ref[3] * size
                etree.SubElement(
                    group,
                    f"{{{SVG_NS}}}rect",
                    x=_fmt(cx - w / 2),
                    y=_fmt(cy - h / 2),
                    width=_fmt(w),
                    height=_fmt(h),
                    fill="none",
                    **{"stroke-opacity": "0.5"},
                )
    return etree.tostring(root, pretty_print=True, encoding="unicode")


def emit_reference_points(
    checkpoint: Union[str, EfficientDetector],
    image: Tensor,
    stage: str = "init",
    k: Optional[int] = None,
    embed_image: bool = False,
    size: int = 256,
) -> str:
    """
    Run the detector on ``image`` and render its reference points.

    Args:
        checkpoint: Path of a checkpoint bundle, or a loaded detector.
        image: Input image [3, H, W].
        stage: ``init``, ``per-layer``, ``final`` or ``all``.
        k: Proposal count; defaults to the detector's ``proposals_end``.
        embed_image: Embed the raster instead of drawing only its frame.
        size: Width and height of the SVG viewport.

    Returns:
        The SVG document as a string.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}'; expected one of {STAGES}")
    if isinstance(checkpoint, EfficientDetector):
        model = checkpoint
    else:
        model = load_checkpoint(checkpoint)
    with no_grad():
        output = model(image, k)
    selected = _select(reference_stages(output), stage)
    logger.debug(
        "Rendering %s for %d containers",
        [label for label, _ in selected],
        len(output.containers),
    )
    return render_svg(
        selected,
        image=image if embed_image else None,
        size=size,
        draw_boxes=model.config.heads.ref_dim == 4,
    )


__all__ = [
    "STAGES",
    "emit_reference_points",
    "reference_stages",
    "render_svg",
]
