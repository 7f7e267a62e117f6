import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.models.errors import ContractError, NumericError, ShapeError
from src.services.tensor import (
    Tensor,
    bilinear_sample,
    concat,
    conv2d,
    grid_sample,
    inverse_sigmoid,
    is_grad_enabled,
    matmul,
    maximum,
    minimum,
    no_grad,
    sigmoid,
    softmax,
    stack,
)


def _off_grid_points(rng, batch, count, height, width):
    """Normalized points whose pixel coordinates stay away from integers."""
    shape = (batch, count)
    xs = rng.integers(0, width - 1, size=shape) + rng.uniform(0.1, 0.9, shape)
    ys = rng.integers(0, height - 1, size=shape) + rng.uniform(0.1, 0.9, shape)
    return np.stack([xs / (width - 1), ys / (height - 1)], axis=-1)


def test_broadcast_add_sums_gradient_back():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_reused_node_accumulates_both_paths():
    x = Tensor(3.0, requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_repeated_backward_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    y.backward()
    y.backward()
    assert x.grad == pytest.approx(8.0)


def test_elementwise_chain(gradcheck, rng):
    a = rng.uniform(0.5, 1.5, (2, 3))
    b = rng.uniform(0.5, 1.5, 3)

    def fn(a, b):
        out = a * b - a / b + a**3 + a.exp() * b.sigmoid() + b.softplus()
        out = out + (a * a + 1.0).sqrt() + (a + 2.0).log() - (-a).abs()
        return out.sum()

    gradcheck(fn, a, b)


def test_batched_matmul(gradcheck, rng):
    weights = rng.normal(size=(2, 3, 5))
    gradcheck(
        lambda a, b: (matmul(a, b) * weights).sum(),
        rng.normal(size=(2, 3, 4)),
        rng.normal(size=(4, 5)),
    )


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_gradient_and_normalization(gradcheck, rng):
    weights = rng.normal(size=(3, 4))
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(softmax(Tensor(x)).data.sum(axis=-1), 1.0)
    gradcheck(lambda x: (softmax(x, axis=-1) * weights).sum(), x)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax(Tensor([0.0, np.inf]))


def test_conv2d_shape_and_gradient(gradcheck, rng):
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=2, padding=1)
    assert out.shape == (3, 3, 3)
    weights = rng.normal(size=(3, 3, 3))
    gradcheck(
        lambda x, w, b: (conv2d(x, w, b, stride=2, padding=1) * weights).sum(),
        x,
        w,
        bias,
    )


def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(1, 4, 4))
    w = rng.normal(size=(1, 1, 2, 2))
    out = conv2d(Tensor(x), Tensor(w)).data
    expected = sum(
        w[0, 0, i, j] * x[0, i : i + 3, j : j + 3] for i in range(2) for j in range(2)
    )
    np.testing.assert_allclose(out[0], expected)


def test_bilinear_sample_midpoint():
    feature = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    assert bilinear_sample(feature, [0.5, 0.5]).item() == pytest.approx(1.5)
    assert bilinear_sample(feature, [0.0, 0.0]).item() == pytest.approx(0.0)
    assert bilinear_sample(feature, [1.0, 0.0]).item() == pytest.approx(1.0)
    assert bilinear_sample(feature, [1.0, 1.0]).item() == pytest.approx(3.0)


def test_bilinear_sample_outside_reads_zero():
    feature = Tensor(np.ones((2, 3, 3)))
    np.testing.assert_array_equal(bilinear_sample(feature, [2.5, 2.5]).data, [0, 0])


def test_bilinear_sample_gradient(gradcheck):
    feature = np.arange(12, dtype=float).reshape(1, 3, 4) ** 1.5
    gradcheck(lambda f, xy: bilinear_sample(f, xy).sum(), feature, [0.37, 0.61])


def test_grid_sample_gradient(gradcheck, rng):
    value = rng.normal(size=(2, 3, 4, 5))
    points = _off_grid_points(rng, 2, 6, 4, 5)
    # one point half a pixel outside the left edge
    points[0, 0] = [-0.5 / 4, 0.4]
    weights = rng.normal(size=(2, 6, 3))
    gradcheck(lambda v, p: (grid_sample(v, p) * weights).sum(), value, points)


def test_indexing_with_repeats(gradcheck, rng):
    index = np.array([0, 2, 2, 4])
    weights = rng.normal(size=(4, 3))
    grads = gradcheck(lambda x: (x[index] * weights).sum(), rng.normal(size=(5, 3)))
    np.testing.assert_allclose(grads[0][2], weights[1] + weights[2])


def test_shape_operations(gradcheck, rng):
    weights = rng.normal(size=12)

    def fn(a, b):
        joined = concat([a, b], axis=1).transpose(1, 0).reshape(-1)
        return (joined * weights).sum() + stack([a, b]).mean(axis=(0, 2)).sum()

    gradcheck(fn, rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))


def test_maximum_minimum_clip_relu(gradcheck):
    a = np.array([0.3, -1.2, 2.0, 0.7])
    b = np.array([0.1, 0.5, 2.5, -0.4])

    def fn(a, b):
        return (
            maximum(a, b) * 2.0
            + minimum(a, b) * 3.0
            + a.clip(-1.0, 1.0)
            + b.relu()
        ).sum()

    gradcheck(fn, a, b)


def test_zero_exponent_has_zero_gradient():
    x = Tensor([0.0, 2.0], requires_grad=True)
    (x**0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_requires_graph():
    with pytest.raises(ContractError):
        Tensor(1.0).backward()


def test_no_grad_stops_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 3.0
    assert is_grad_enabled()
    assert not y.requires_grad


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-8.0, max_value=8.0))
def test_inverse_sigmoid_inverts_sigmoid(x):
    assert inverse_sigmoid(sigmoid(x)).item() == pytest.approx(x, abs=1e-6)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        out = sigmoid(np.array([-800.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 1.0])
