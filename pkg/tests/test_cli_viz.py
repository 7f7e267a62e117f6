import json
from pathlib import Path

import numpy as np
import pytest
from lxml import etree

from src.config.settings import apply_overrides
from src.models.errors import ConfigError
from src.services.checkpoint import save_checkpoint
from src.services.detector import EfficientDetector
from src.services.visualization import SVG_NS, emit_reference_points
from src.workers.ablation import (
    AXES,
    METRIC_COLUMNS,
    ablation_entries,
    parse_axes,
    run_ablation,
)
from src.workers.cli import _overrides, main
from version import get_version

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.ini"
SMOKE_SETS = [
    "--set",
    "train.epochs=1",
    "--set",
    "train.lr_drop_epoch=1",
    "--set",
    "data.train_count=2",
    "--set",
    "data.eval_count=1",
]


def _parse(svg):
    return etree.fromstring(svg.encode("utf-8"))


def _circles(root, group=None):
    path = ".//{%s}circle" % SVG_NS
    if group is not None:
        path = ".//{%s}g[@id='%s']/{%s}circle" % (SVG_NS, group, SVG_NS)
    return root.findall(path)


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


# --------------------------------------------------------------------------- #
# Reference-point SVG
# --------------------------------------------------------------------------- #


@pytest.fixture
def image(shape_samples):
    return shape_samples[0].pixels


def _model(config, **overrides):
    if overrides:
        config = apply_overrides(config, overrides)
    return EfficientDetector(config)


def test_one_circle_per_container(tiny_config, image):
    root = _parse(emit_reference_points(_model(tiny_config), image, "init"))
    assert root.tag == "{%s}svg" % SVG_NS
    assert len(_circles(root)) == 6
    assert root.find(".//{%s}rect[@class='frame']" % SVG_NS) is not None
    assert root.find(".//{%s}image" % SVG_NS) is None


def test_grid_init_circles_on_grid(tiny_config, image):
    model = _model(tiny_config, **{"heads.init": "grid"})
    root = _parse(emit_reference_points(model, image, "init", k=4, size=256))
    points = sorted((c.get("cx"), c.get("cy")) for c in _circles(root))
    assert points == [
        ("192.000", "192.000"),
        ("192.000", "64.000"),
        ("64.000", "192.000"),
        ("64.000", "64.000"),
    ]


@pytest.mark.parametrize(
    "stage, groups",
    [
        ("init", ["init"]),
        ("per-layer", ["layer-1", "layer-2"]),
        ("final", ["layer-2"]),
        ("all", ["init", "layer-1", "layer-2"]),
    ],
)
def test_stage_groups(tiny_config, image, stage, groups):
    root = _parse(emit_reference_points(_model(tiny_config), image, stage))
    found = [g.get("id") for g in root.findall(".//{%s}g" % SVG_NS)]
    assert found == groups
    for group in groups:
        assert len(_circles(root, group)) == 6
    colors = {g.get("stroke") for g in root.findall(".//{%s}g" % SVG_NS)}
    assert len(colors) == len(groups)


def test_boxes_drawn_only_for_box_references(tiny_config, image):
    boxes = _parse(emit_reference_points(_model(tiny_config), image, "init"))
    assert len(boxes.findall(".//{%s}g/{%s}rect" % (SVG_NS, SVG_NS))) == 6
    points = _parse(
        emit_reference_points(_model(tiny_config, **{"heads.ref": "2d"}), image, "init")
    )
    assert points.findall(".//{%s}g/{%s}rect" % (SVG_NS, SVG_NS)) == []


def test_embedded_image(tiny_config, image):
    root = _parse(
        emit_reference_points(_model(tiny_config), image, "final", embed_image=True)
    )
    raster = root.find(".//{%s}image" % SVG_NS)
    href = raster.get("{http://www.w3.org/1999/xlink}href")
    assert href.startswith("data:image/png;base64,")


def test_unknown_stage(tiny_config, image):
    with pytest.raises(ConfigError):
        emit_reference_points(_model(tiny_config), image, "middle")


def test_renders_from_checkpoint_path(tiny_config, image, tmp_path):
    path = save_checkpoint(_model(tiny_config), tmp_path / "ckpt.joblib")
    root = _parse(emit_reference_points(str(path), image, "init"))
    assert len(_circles(root)) == 6


# --------------------------------------------------------------------------- #
# Ablation matrix
# --------------------------------------------------------------------------- #


def test_init_axis_rows():
    entries = ablation_entries(["init"])
    assert [labels["init"] for labels, _ in entries] == [
        "dense",
        "learnable",
        "grid",
        "center",
        "border",
    ]
    assert entries[1][1] == {"heads.init": "learnable"}


def test_axes_combine_as_product():
    entries = ablation_entries(["ref", "assign"])
    assert len(entries) == len(AXES["ref"]) * len(AXES["assign"])
    assert entries[0] == (
        {"ref": "4d", "assign": "1"},
        {"heads.ref": "4d", "loss.assign_n": 1},
    )


@pytest.mark.parametrize("axes", [[], ["depth"], ["init", "init"]])
def test_bad_axes(axes):
    with pytest.raises(ConfigError):
        ablation_entries(axes)


def test_parse_axes():
    assert parse_axes(["init, assign", "ref"]) == ["init", "assign", "ref"]
    assert parse_axes(None) == []


def test_run_ablation_writes_table(tiny_config, tmp_path):
    config = apply_overrides(
        tiny_config,
        {
            "train.epochs": 1,
            "train.lr_drop_epoch": 1,
            "data.train_count": 2,
            "data.eval_count": 1,
        },
    )
    table, path = run_ablation(config, ["share_head"], tmp_path)
    assert path.is_file()
    assert list(table.columns) == ["share_head"] + list(METRIC_COLUMNS)
    assert list(table["share_head"]) == ["true", "false"]
    assert table["ap50"].between(0.0, 1.0).all()
    assert (table["center_dist_init"] >= 0).all()


# --------------------------------------------------------------------------- #
# Command line
# --------------------------------------------------------------------------- #


def test_gen_data(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path), "--count", "3", "--seed", "4"])
    assert code == 0
    payload = _stdout_json(capsys)
    assert payload["images"] == 3
    assert Path(payload["annotations"]).is_file()
    assert len(list(tmp_path.glob("*.png"))) == 3


def test_train_eval_viz(tmp_path, capsys):
    argv = ["train", "--config", str(SMOKE), *SMOKE_SETS, "--seed", "7"]
    assert main(argv + ["--output-dir", str(tmp_path / "a")]) == 0
    first = _stdout_json(capsys)
    assert main(argv + ["--output-dir", str(tmp_path / "b")]) == 0
    second = _stdout_json(capsys)
    assert (
        Path(first["metrics"]).read_text() == Path(second["metrics"]).read_text()
    )
    checkpoint = first["checkpoint"]

    assert main(["eval", "--checkpoint", checkpoint]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    assert set(json.loads(out[0])) == {"ap50", "ap75", "map", "recall"}

    data_dir = tmp_path / "data"
    assert main(["gen-data", "--out", str(data_dir), "--count", "2"]) == 0
    annotations = _stdout_json(capsys)["annotations"]
    assert main(["eval", "--checkpoint", checkpoint, "--data", annotations]) == 0
    assert 0.0 <= _stdout_json(capsys)["ap50"] <= 1.0

    svg_path = tmp_path / "refs.svg"
    code = main(
        ["viz", "--checkpoint", checkpoint, "--stage", "init", "--out", str(svg_path)]
    )
    assert code == 0
    root = etree.parse(str(svg_path)).getroot()
    assert len(_circles(root)) == 6


@pytest.mark.parametrize(
    "argv, error",
    [
        (["train", "--set", "model.width=3"], "ConfigError"),
        (["train", "--set", "model.width"], "ConfigError"),
        (["eval", "--checkpoint", "missing.joblib"], "FileNotFoundError"),
        (["ablate", "--axis", "depth"], "ConfigError"),
    ],
)
def test_errors_exit_with_json(argv, error, tmp_path, capsys):
    code = main(argv + (["--output-dir", str(tmp_path)] if argv[0] != "eval" else []))
    assert code == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == error
    assert record["message"]


@pytest.mark.parametrize(
    "argv",
    [
        ["ablate"],
        ["fit"],
        [],
        ["gen-data", "--out", "data", "--count", "many"],
        ["viz", "--checkpoint", "c.joblib", "--out", "o.svg", "--stage", "x"],
    ],
)
def test_usage_errors_exit_with_json(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    record = json.loads(err[0])
    assert record["error"] == "UsageError"
    assert record["message"].startswith("edetr")


def test_config_values_are_parsed_as_json():
    assert _overrides(["model.d_model=16", "heads.init=grid", "a.b=[1, 2]"]) == {
        "model.d_model": 16,
        "heads.init": "grid",
        "a.b": [1, 2],
    }
    assert np.isclose(_overrides(["train.lr=1e-3"])["train.lr"], 1e-3)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["--version"])
    assert exit_info.value.code == 0
    assert capsys.readouterr().out.strip() == get_version()
