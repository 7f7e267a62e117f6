import numpy as np
import pytest

from src.models.errors import ShapeError
from src.services.layers import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    layer_norm,
)
from src.services.tensor import Tensor


class _Shared(Module):
    def __init__(self, rng):
        self.first = Linear(3, 2, rng)
        self.second = self.first
        self._hidden = Linear(3, 2, rng)


def test_mlp_parameter_names(rng):
    names = [name for name, _ in MLP(4, 8, 2, 3, rng).named_parameters()]
    assert names == [
        "layers.0.weight",
        "layers.0.bias",
        "layers.1.weight",
        "layers.1.bias",
        "layers.2.weight",
        "layers.2.bias",
    ]


def test_shared_module_reported_once(rng):
    names = [name for name, _ in _Shared(rng).named_parameters()]
    assert names == ["first.weight", "first.bias"]


def test_zero_last_layer_outputs_zero(rng):
    mlp = MLP(4, 8, 4, 3, rng, zero_last=True)
    out = mlp(Tensor(rng.normal(size=(5, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((5, 4)))


def test_state_dict_round_trip(rng):
    source = MLP(4, 8, 2, 2, rng)
    target = MLP(4, 8, 2, 2, np.random.default_rng(99))
    target.load_state_dict(source.state_dict())
    for (_, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_load_state_dict_rejects_missing(rng):
    layer = Linear(3, 2, rng)
    with pytest.raises(ShapeError):
        layer.load_state_dict({"weight": np.zeros((3, 2))})


def test_parameter_assign_checks_shape():
    param = Parameter(np.zeros((2, 2)), name="w")
    with pytest.raises(ShapeError):
        param.assign(np.zeros(4))


def test_layer_norm_statistics(rng):
    out = LayerNorm(6)(Tensor(rng.normal(3.0, 2.0, size=(4, 6)))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_gradient(gradcheck, rng):
    weights = rng.normal(size=(3, 5))
    gradcheck(
        lambda x, w, b: (layer_norm(x, w, b) * weights).sum(),
        rng.normal(size=(3, 5)),
        rng.uniform(0.5, 1.5, 5),
        rng.normal(size=5),
    )
