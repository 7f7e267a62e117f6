import numpy as np
import pytest

from src.config.settings import apply_overrides
from src.models.errors import ConfigError
from src.services.detector import EfficientDetector


@pytest.fixture
def image(shape_samples):
    return shape_samples[0].pixels


def _detector(config, **overrides):
    if overrides:
        config = apply_overrides(config, overrides)
    return EfficientDetector(config, np.random.default_rng(0))


def test_forward_shapes(tiny_config, image):
    output = _detector(tiny_config)(image)
    assert len(output.memory) == 85
    assert len(output.anchors) == 85
    assert output.dense.logits.shape == (85, 3)
    assert len(output.containers) == 6
    assert len(output.layers) == 2
    assert output.final is output.layers[-1]
    assert output.final.boxes.shape == (6, 4)


def test_dense_proposals_are_capped_at_token_count(tiny_config, image):
    model = _detector(tiny_config)
    assert model.effective_k(200, 85) == 85
    assert len(model(image, k=200).containers) == 85


def test_shared_head_is_one_object(tiny_config):
    model = _detector(tiny_config)
    assert model.dense_head is model.head
    model.head.class_embed.bias.data[0] = 5.0
    assert model.dense_head.class_embed.bias.data[0] == 5.0
    names = [name for name, _ in model.named_parameters()]
    assert not any(name.startswith("dense_head.") for name in names)
    assert model.query_bank is None


def test_separate_dense_head(tiny_config):
    model = _detector(tiny_config, **{"heads.share_head": False})
    assert model.dense_head is not model.head
    names = [name for name, _ in model.named_parameters()]
    assert any(name.startswith("dense_head.") for name in names)


def test_construction_is_deterministic(tiny_config):
    first = _detector(tiny_config).state_dict()
    second = _detector(tiny_config).state_dict()
    assert first.keys() == second.keys()
    for name in first:
        np.testing.assert_array_equal(first[name], second[name])


def test_learnable_init_uses_query_bank(tiny_config, image):
    model = _detector(tiny_config, **{"heads.init": "learnable"})
    assert model.query_bank.size == 12
    output = model(image, k=12)
    assert output.containers.strategy == "learnable"
    with pytest.raises(ConfigError):
        model(image, k=13)


@pytest.mark.parametrize(
    "overrides",
    [
        {"heads.ref": "2d"},
        {"heads.objectness": "agnostic"},
        {"heads.query_init": "learned"},
        {"heads.init": "border", "heads.ref": "2d"},
    ],
)
def test_variants_run(tiny_config, image, overrides):
    output = _detector(tiny_config, **overrides)(image)
    assert output.final.boxes.shape == (6, 4)
    if overrides.get("heads.objectness") == "agnostic":
        assert output.dense.objectness_logits.shape == (85, 1)


def test_predict(tiny_config, image):
    prediction = _detector(tiny_config).predict(image)
    assert len(prediction) == 6
    assert np.all((prediction.scores > 0) & (prediction.scores < 1))
    assert set(prediction.labels) <= {0, 1, 2}
