import numpy as np
import pytest
from pydantic import ValidationError

from src.models.detection import FeaturePyramid
from src.models.errors import ShapeError
from src.services.deformable_attention import (
    AttentionConfig,
    DeformableAttention,
    MultiHeadSelfAttention,
    deform_attn,
    flatten_pyramid,
    level_cell_centers,
    radial_offset_bias,
    self_attn,
)
from src.services.tensor import Tensor, bilinear_sample

SHAPES = [(3, 3), (2, 2)]


def _attention(rng, ref_dim=4, levels=2, d_model=4):
    config = AttentionConfig(
        d_model=d_model, num_heads=2, points_per_level=2, num_levels=levels
    )
    return DeformableAttention(config, rng, ref_dim=ref_dim)


def _randomize(attn, rng):
    for layer in (attn.sampling_offsets, attn.attention_weights):
        layer.weight.assign(rng.normal(0.0, 0.3, size=layer.weight.shape))


def _pyramid(rng, d_model=4):
    shapes = [(8, 8), (4, 4), (2, 2), (1, 1)]
    return FeaturePyramid(
        levels=[Tensor(rng.normal(size=(d_model, h, w))) for h, w in shapes]
    )


def test_config_requires_divisible_width():
    with pytest.raises(ValidationError):
        AttentionConfig(d_model=6, num_heads=4)


def test_radial_bias_for_boxes_reaches_box_edge():
    bias = radial_offset_bias(4, 2, 2, ref_dim=4, base_scale=0.05)
    assert bias.shape == (4, 2, 2, 2)
    np.testing.assert_allclose(bias[0, :, -1], [[1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(bias[1, 0, -1], [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(bias[0, 0, 0], [0.5, 0.0])
    assert np.abs(bias).max() == pytest.approx(1.0)


def test_radial_bias_for_points_grows_with_level():
    bias = radial_offset_bias(4, 3, 2, ref_dim=2, base_scale=0.05)
    np.testing.assert_allclose(bias[0, :, -1, 0], [0.05, 0.1, 0.2])


def test_untrained_sampling_field(rng):
    config = AttentionConfig(d_model=8, num_heads=4, points_per_level=2, num_levels=2)
    attn = DeformableAttention(config, rng)
    refs = np.array([[0.5, 0.5, 0.2, 0.2]])
    field = attn.sampling_field(Tensor(rng.normal(size=(1, 8))), refs)
    assert field.locations.shape == (1, 4, 2, 2, 2)
    np.testing.assert_allclose(field.weights.data, 0.25)
    np.testing.assert_allclose(field.locations.data[0, 0, 0, 0], [0.55, 0.5])
    np.testing.assert_allclose(field.locations.data[0, 0, 0, 1], [0.6, 0.5])


def test_weights_sum_to_one_per_head(rng):
    attn = _attention(rng)
    _randomize(attn, rng)
    refs = np.array([[0.3, 0.6, 0.2, 0.4], [0.7, 0.2, 0.5, 0.1]])
    field = attn.sampling_field(Tensor(rng.normal(size=(2, 4))), refs)
    np.testing.assert_allclose(field.weights.data.sum(axis=(2, 3)), 1.0)


def test_output_shape_and_reference_checks(rng):
    attn = _attention(rng)
    value = Tensor(rng.normal(size=(13, 4)))
    queries = Tensor(rng.normal(size=(3, 4)))
    refs = np.tile([0.5, 0.5, 0.3, 0.3], (3, 1))
    assert attn(queries, refs, value, SHAPES).shape == (3, 4)
    with pytest.raises(ShapeError):
        attn(queries, refs[:, :2], value, SHAPES)
    with pytest.raises(ShapeError):
        attn(queries, refs, value, SHAPES[:1])
    with pytest.raises(ShapeError):
        attn(queries, refs, Tensor(rng.normal(size=(12, 4))), SHAPES)


def test_deformable_attention_gradient(gradcheck, rng):
    attn = _attention(rng)
    _randomize(attn, rng)
    mix = rng.normal(size=(2, 4))
    gradcheck(
        lambda q, r, v: (attn(q, r, v, SHAPES) * mix).sum(),
        rng.normal(size=(2, 4)),
        np.array([[0.41, 0.47, 0.33, 0.21], [0.62, 0.31, 0.27, 0.43]]),
        rng.normal(size=(13, 4)),
    )


def test_point_reference_gradient(gradcheck, rng):
    attn = _attention(rng, ref_dim=2)
    _randomize(attn, rng)
    mix = rng.normal(size=(2, 4))
    gradcheck(
        lambda q, r, v: (attn(q, r, v, SHAPES) * mix).sum(),
        rng.normal(size=(2, 4)),
        np.array([[0.37, 0.52], [0.71, 0.24]]),
        rng.normal(size=(13, 4)),
    )


def test_deform_attn_reads_flattened_pyramid(rng):
    attn = _attention(rng, levels=4)
    pyramid = _pyramid(rng)
    queries = Tensor(rng.normal(size=(3, 4)))
    refs = np.tile([0.4, 0.6, 0.2, 0.2], (3, 1))
    direct = attn(queries, refs, flatten_pyramid(pyramid), pyramid.spatial_shapes)
    np.testing.assert_allclose(
        deform_attn(queries, refs, pyramid, attn).data, direct.data
    )
    with pytest.raises(ShapeError):
        deform_attn(queries, refs, pyramid, _attention(rng, levels=2))


def test_flatten_pyramid_is_row_major_per_level(rng):
    pyramid = _pyramid(rng)
    tokens = flatten_pyramid(pyramid).data
    assert tokens.shape == (85, 4)
    np.testing.assert_array_equal(tokens[2 * 8 + 5], pyramid.levels[0].data[:, 2, 5])
    np.testing.assert_array_equal(tokens[64 + 4 + 3], pyramid.levels[1].data[:, 1, 3])
    np.testing.assert_array_equal(tokens[-1], pyramid.levels[3].data[:, 0, 0])


def test_level_cell_centers():
    centers, levels = level_cell_centers([(2, 2), (1, 1)])
    np.testing.assert_allclose(
        centers,
        [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75], [0.5, 0.5]],
    )
    np.testing.assert_array_equal(levels, [0, 0, 0, 0, 1])


def test_self_attention_is_permutation_equivariant(rng):
    attn = MultiHeadSelfAttention(4, 2, rng)
    queries = rng.normal(size=(5, 4))
    order = np.array([3, 0, 4, 1, 2])
    out = self_attn(Tensor(queries), attn).data
    permuted = self_attn(Tensor(queries[order]), attn).data
    np.testing.assert_allclose(permuted, out[order], atol=1e-12)


def test_self_attention_gradient(gradcheck, rng):
    attn = MultiHeadSelfAttention(4, 2, rng)
    mix = rng.normal(size=(3, 4))
    gradcheck(
        lambda q, p: (attn(q, p) * mix).sum(),
        rng.normal(size=(3, 4)),
        rng.normal(size=(3, 4)),
    )


def test_doubling_box_size_doubles_sampling_spread(rng):
    attn = _attention(rng)
    _randomize(attn, rng)
    queries = Tensor(rng.normal(size=(2, 4)))
    small = np.array([[0.4, 0.5, 0.1, 0.2], [0.6, 0.3, 0.2, 0.05]])
    large = small.copy()
    large[:, 2:] *= 2.0
    centers = small[:, None, None, None, :2]
    near = attn.sampling_field(queries, small).locations.data - centers
    far = attn.sampling_field(queries, large).locations.data - centers
    np.testing.assert_allclose(far, 2.0 * near, rtol=0, atol=1e-15)


def test_constant_pyramid_reads_projected_constant(rng):
    attn = _attention(rng, levels=4)
    _randomize(attn, rng)
    v = rng.normal(size=4)
    pyramid = FeaturePyramid(
        levels=[
            Tensor(np.tile(v[:, None, None], (1, h, w)))
            for h, w in [(8, 8), (4, 4), (2, 2), (1, 1)]
        ]
    )
    queries = Tensor(0.5 * rng.normal(size=(3, 4)))
    refs = np.array(
        [[0.5, 0.5, 0.2, 0.2], [0.45, 0.55, 0.1, 0.2], [0.55, 0.45, 0.2, 0.1]]
    )
    locations = attn.sampling_field(queries, refs).locations.data
    assert locations.min() >= 0.0 and locations.max() <= 1.0
    out = deform_attn(queries, refs, pyramid, attn).data
    expected = attn.output_proj(attn.value_proj(Tensor(v[None]))).data
    np.testing.assert_allclose(out, np.repeat(expected, 3, axis=0), atol=1e-12)


def test_collapsed_attention_reads_reference_center(rng):
    attn = _attention(rng, levels=4)
    attn.sampling_offsets.bias.assign(np.zeros(attn.sampling_offsets.bias.shape))
    for proj in (attn.value_proj, attn.output_proj):
        proj.weight.assign(np.eye(4))
        proj.bias.assign(np.zeros(4))
    level = 1
    logits = np.full((2, 4, 2), -1e3)
    logits[:, level, 0] = 0.0
    attn.attention_weights.bias.assign(logits.reshape(-1))
    pyramid = _pyramid(rng)
    refs = np.array([[0.3, 0.7, 0.4, 0.2], [0.62, 0.18, 0.1, 0.1]])
    out = deform_attn(Tensor(rng.normal(size=(2, 4))), refs, pyramid, attn).data
    expected = [bilinear_sample(pyramid.levels[level], ref[:2]).data for ref in refs]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_deform_attn_is_permutation_equivariant(rng):
    attn = _attention(rng, levels=4)
    _randomize(attn, rng)
    pyramid = _pyramid(rng)
    queries = rng.normal(size=(4, 4))
    refs = rng.uniform(0.2, 0.8, size=(4, 4))
    order = np.array([2, 0, 3, 1])
    out = deform_attn(Tensor(queries), refs, pyramid, attn).data
    moved = deform_attn(Tensor(queries[order]), refs[order], pyramid, attn).data
    np.testing.assert_allclose(moved, out[order], atol=1e-12)
