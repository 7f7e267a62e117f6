import json
from pathlib import Path

import numpy as np
import pytest

from src.models.errors import ConfigError, ParseError
from src.services.data_pipeline import (
    SHAPE_NAMES,
    dump_coco,
    epoch_order,
    generate_shapes,
    load_coco_annotations,
    load_image,
    parse_coco,
)

FIXTURE = Path(__file__).parent / "fixtures" / "coco_tiny.json"


def test_generation_is_deterministic():
    first = generate_shapes(seed=5, count=3)
    second = generate_shapes(seed=5, count=3)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.pixels.data, b.pixels.data)
        assert a.truth == b.truth
        assert a.id == b.id
    other = generate_shapes(seed=6, count=1)[0]
    assert not np.array_equal(other.pixels.data, first[0].pixels.data)


def test_generated_samples_respect_limits():
    samples = generate_shapes(seed=1, count=20, image_size=64, max_objects=3)
    for index, sample in enumerate(samples):
        assert sample.pixels.shape == (3, 64, 64)
        assert 1 <= len(sample.truth) <= 3
        assert all(0 <= label < 3 for label in sample.truth.labels)
        boxes = sample.truth.boxes_array()
        corners = np.concatenate(
            [boxes[:, :2] - boxes[:, 2:] / 2, boxes[:, :2] + boxes[:, 2:] / 2], axis=1
        )
        assert corners.min() >= -1e-12 and corners.max() <= 1 + 1e-12
        assert sample.id == f"shapes-1-{index:05d}"


def test_generated_boxes_cover_drawn_pixels():
    sample = generate_shapes(seed=2, count=1, max_objects=1)[0]
    box = sample.truth.boxes[0]
    x, y, w, h = (int(round(v)) for v in box.to_pixel_xywh(64, 64))
    pixels = sample.pixels.data
    # shapes are drawn with every channel at 0.55 or above
    bright = (pixels >= 0.55).all(axis=0)
    assert bright[y : y + h, x : x + w].any()
    bright[y : y + h, x : x + w] = False
    assert not bright.any()


def test_all_shape_kinds_render():
    samples = generate_shapes(seed=0, count=40, num_classes=len(SHAPE_NAMES))
    labels = {label for s in samples for label in s.truth.labels}
    assert labels == set(range(len(SHAPE_NAMES)))


@pytest.mark.parametrize(
    "kwargs",
    [{"image_size": 16}, {"num_classes": 9}, {"num_classes": 0}, {"max_objects": 0}],
)
def test_generation_rejects_bad_arguments(kwargs):
    with pytest.raises(ConfigError):
        generate_shapes(seed=0, count=1, **kwargs)


def test_epoch_order_is_seeded_permutation():
    order = epoch_order(50, seed=4, epoch=0)
    assert sorted(order.tolist()) == list(range(50))
    np.testing.assert_array_equal(order, epoch_order(50, seed=4, epoch=0))
    assert not np.array_equal(order, epoch_order(50, seed=4, epoch=1))


def test_coco_boxes_are_normalized():
    dataset = load_coco_annotations(FIXTURE)
    box = dataset.truths[11].boxes[0]
    assert (box.cx, box.cy, box.w, box.h) == pytest.approx((0.25, 0.20, 0.30, 0.20))


def test_coco_categories_are_remapped_in_id_order():
    dataset = load_coco_annotations(FIXTURE)
    assert dataset.category_ids == [3, 7]
    assert dataset.categories == ["rectangle", "disk"]
    assert dataset.truths[11].labels == [1, 0]


def test_coco_boxes_are_clamped_or_dropped():
    dataset = load_coco_annotations(FIXTURE)
    # [40, 40, 40, 40] in a 64 px image is clamped to [40, 40, 24, 24]
    box = dataset.truths[12].boxes[0]
    assert box.to_pixel_xywh(64, 64) == pytest.approx((40.0, 40.0, 24.0, 24.0))
    # [200, 10, 10, 10] lies outside a 128 px wide image
    assert len(dataset.truths[15]) == 1
    assert len(dataset.truths[14]) == 0
    assert dataset.clamped_boxes == 2


def test_coco_validation_error_names_json_path():
    raw = json.loads(FIXTURE.read_text())
    raw["annotations"][0]["bbox"] = [1, 2, 3]
    with pytest.raises(ParseError) as info:
        parse_coco(raw)
    assert info.value.path == "annotations[0].bbox"


def test_coco_rejects_duplicate_image_ids():
    raw = json.loads(FIXTURE.read_text())
    raw["images"][1]["id"] = 11
    with pytest.raises(ParseError) as info:
        parse_coco(raw)
    assert info.value.path == "images[1].id"


def test_coco_rejects_unknown_category():
    raw = json.loads(FIXTURE.read_text())
    raw["annotations"][2]["category_id"] = 99
    with pytest.raises(ParseError) as info:
        parse_coco(raw)
    assert info.value.path == "annotations[2].category_id"


def test_missing_annotation_file(tmp_path):
    with pytest.raises(ParseError):
        load_coco_annotations(tmp_path / "absent.json")


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        load_coco_annotations(path)


def test_dump_and_reload(tmp_path, shape_samples):
    path = dump_coco(shape_samples, tmp_path)
    dataset = load_coco_annotations(path)
    reloaded = dataset.load_samples(image_size=64)
    assert len(reloaded) == len(shape_samples)
    for original, loaded in zip(shape_samples, reloaded):
        np.testing.assert_allclose(
            loaded.pixels.data, original.pixels.data, atol=0.5 / 255 + 1e-12
        )
        np.testing.assert_allclose(
            loaded.truth.boxes_array(), original.truth.boxes_array(), atol=1e-9
        )
        assert loaded.truth.labels == original.truth.labels


def test_load_image_missing(tmp_path):
    with pytest.raises(ParseError):
        load_image(tmp_path / "absent.png")
