from typing import Callable, List

import numpy as np
import pytest

from src.config.settings import DetectorConfig, apply_overrides
from src.models.detection import ImageSample
from src.services.data_pipeline import generate_shapes
from src.services.tensor import Tensor, no_grad

TINY_OVERRIDES = {
    "model.d_model": 16,
    "model.encoder_layers": 1,
    "model.decoder_layers": 2,
    "model.heads": 2,
    "model.points": 2,
    "model.backbone_channels": [4, 8, 8, 8],
    "heads.hidden_dim": 16,
    "schedule.proposals_start": 12,
    "schedule.proposals_end": 6,
    "train.epochs": 2,
    "train.lr": 1e-3,
    "train.lr_drop_epoch": 2,
    "data.train_count": 4,
    "data.eval_count": 2,
}


def numeric_grad(fn: Callable[[], float], array: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        plus = fn()
        array[index] = original - h
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


@pytest.fixture
def gradcheck():
    """
    ``gradcheck(fn, *arrays)`` compares the autodiff gradient of the scalar
    ``fn(*tensors)`` with central differences for every input.
    """

    def check(fn, *arrays, h=1e-5, rtol=1e-4, atol=1e-7) -> List[np.ndarray]:
        tensors = [
            Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays
        ]
        fn(*tensors).backward()
        analytic = [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
        ]

        def value() -> float:
            with no_grad():
                return fn(*tensors).item()

        for tensor, grad in zip(tensors, analytic):
            expected = numeric_grad(value, tensor.data, h)
            np.testing.assert_allclose(grad, expected, rtol=rtol, atol=atol)
        return analytic

    return check


@pytest.fixture
def tiny_config() -> DetectorConfig:
    return apply_overrides(DetectorConfig(), TINY_OVERRIDES)


@pytest.fixture(scope="session")
def shape_samples() -> List[ImageSample]:
    return generate_shapes(seed=3, count=4, image_size=64, max_objects=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
