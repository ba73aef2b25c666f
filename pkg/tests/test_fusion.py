import numpy as np
import pytest

from paratranscnn import ops
from paratranscnn.fusion import ChannelAttention, StageFusion, apply, hidden_width, merge
from paratranscnn.tensor import Tensor

from conftest import module_gradcheck

F64 = np.float64


def _features(rng, b=2, ci=3, cj=5, h=4, w=4):
    return Tensor(rng.standard_normal((b, ci, h, w))), Tensor(rng.standard_normal((b, cj, h, w)))


def test_merge_shape_and_order(rng):
    c, v = Tensor(np.zeros((1, 64, 56, 56), dtype=np.float32)), Tensor(np.zeros((1, 320, 56, 56), dtype=np.float32))
    assert merge(c, v).shape == (1, 384, 56, 56)
    c, v = _features(rng)
    m = merge(c, v).data
    np.testing.assert_array_equal(m[:, :3], c.data)
    np.testing.assert_array_equal(m[:, 3:], v.data)


def test_merge_zero_vit(rng):
    c, _ = _features(rng)
    m = merge(c, Tensor(np.zeros((2, 5, 4, 4)))).data
    np.testing.assert_array_equal(m[:, :3], c.data)
    assert not m[:, 3:].any()


def test_merge_misaligned():
    with pytest.raises(ops.ShapeError):
        merge(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))


def test_hidden_width_clamp():
    assert hidden_width(384, 16) == 24
    assert hidden_width(24, 16) == 4
    assert hidden_width(3, 16) == 3


def test_zero_init_gives_half(rng):
    ca = ChannelAttention(8, rng=rng, dtype=F64)
    ca.zero_init()
    f_m = rng.standard_normal((2, 8, 3, 5))
    f_ca, f_am = ca(Tensor(f_m), return_map=True)
    assert f_am.shape == (2, 8, 1, 1)
    np.testing.assert_array_equal(f_am.data, 0.5)
    np.testing.assert_array_equal(f_ca.data, 0.5 * f_m)


def test_apply_with_unit_weights_is_identity(rng):
    f_m = rng.standard_normal((2, 6, 3, 3))
    np.testing.assert_array_equal(apply(Tensor(np.ones((2, 6, 1, 1))), Tensor(f_m)).data, f_m)


def test_against_scalar_reference(rng):
    c = 6
    ca = ChannelAttention(c, reduction=2, rng=rng, dtype=F64)
    for p in ca.parameters():
        p.data = rng.standard_normal(p.shape)
    f_m = rng.standard_normal((2, c, 3, 4))
    got = ca(Tensor(f_m)).data
    w1, b1, w2, b2 = ca.fc1.weight.data, ca.fc1.bias.data, ca.fc2.weight.data, ca.fc2.bias.data
    hidden = w1.shape[1]
    ref = np.zeros_like(f_m)
    for b in range(2):
        pooled = [sum(f_m[b, ch, i, j] for i in range(3) for j in range(4)) / 12 for ch in range(c)]
        z1 = [max(0.0, sum(pooled[ch] * w1[ch, k] for ch in range(c)) + b1[k]) for k in range(hidden)]
        for ch in range(c):
            z2 = sum(z1[k] * w2[k, ch] for k in range(hidden)) + b2[ch]
            s = 1.0 / (1.0 + np.exp(-z2))
            ref[b, ch] = s * f_m[b, ch]
    assert np.abs(got - ref).max() < 1e-12


def test_weights_in_open_unit_interval_and_bounded_output(rng):
    ca = ChannelAttention(16, rng=rng, dtype=F64)
    for p in ca.parameters():
        p.data = rng.standard_normal(p.shape)
    f_m = rng.standard_normal((3, 16, 4, 4)) * 2
    f_ca, f_am = ca(Tensor(f_m), return_map=True)
    assert (f_am.data > 0).all() and (f_am.data < 1).all()
    assert (np.abs(f_ca.data) <= np.abs(f_m)).all()


def test_attention_gradients(rng):
    ca = ChannelAttention(8, reduction=2, rng=rng, dtype=F64)
    for p in ca.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    module_gradcheck(ca, rng.standard_normal((2, 8, 3, 3)))


def test_channel_permutation_equivariance(rng):
    c = 8
    ca = ChannelAttention(c, reduction=2, rng=rng, dtype=F64)
    for p in ca.parameters():
        p.data = rng.standard_normal(p.shape)
    perm = rng.permutation(c)
    cb = ChannelAttention(c, reduction=2, rng=rng, dtype=F64)
    cb.fc1.weight.data = ca.fc1.weight.data[perm]
    cb.fc1.bias.data = ca.fc1.bias.data.copy()
    cb.fc2.weight.data = ca.fc2.weight.data[:, perm]
    cb.fc2.bias.data = ca.fc2.bias.data[perm]
    f_m = rng.standard_normal((2, c, 3, 3))
    np.testing.assert_allclose(cb(Tensor(f_m[:, perm])).data, ca(Tensor(f_m)).data[:, perm], rtol=1e-12, atol=1e-14)


def test_stage_fusion_without_attention_is_merge(rng):
    c, v = _features(rng)
    fused, f_am, f_m = StageFusion(3, 5, use_attention=False, rng=rng, dtype=F64)(c, v)
    assert f_am is None
    np.testing.assert_array_equal(fused.data, merge(c, v).data)
    assert fused.shape == StageFusion(3, 5, rng=rng, dtype=F64)(c, v)[0].shape
