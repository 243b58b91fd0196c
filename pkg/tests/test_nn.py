import numpy as np
import pytest
from hypothesis import given, strategies as st

from piffuse import tensor as T
from piffuse.nn import (Conv2dLayer, ConvReluConv, LkaLayer, SeLayer, bicubic_matrix, bicubic_upsample,
                        conv2d, cubic_kernel, global_avg_pool, lka_forward, se_forward)
from piffuse.tensor import Parameter, ShapeError, gradcheck, gradcheck_params

F64 = np.float64


def test_identity_1x1_conv(rng):
    layer = Conv2dLayer(3, 3, 1, dtype=F64)
    layer.weight.data[:] = np.eye(3)[None, None]
    x = rng.standard_normal((5, 5, 3))
    np.testing.assert_array_equal(conv2d(x, layer).data, x)


def test_all_ones_same_conv_counts():
    layer = Conv2dLayer(1, 1, 3, dtype=F64)
    layer.weight.data[:] = 1.0
    out = conv2d(np.ones((5, 5, 1)), layer).data[..., 0]
    assert out[2, 2] == 9.0
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 4.0
    assert out[0, 2] == 6.0


def test_depthwise_channels_independent(rng):
    layer = Conv2dLayer(4, 4, 3, groups=4, rng=rng, dtype=F64)
    x = rng.standard_normal((6, 6, 4))
    x[..., 2] = 0.0
    assert not np.any(conv2d(x, layer).data[..., 2])


def test_conv_matches_naive_loop(rng):
    layer = Conv2dLayer(2, 3, 3, dilation=2, rng=rng, dtype=F64)
    layer.bias.data[:] = rng.standard_normal(3)
    x = rng.standard_normal((7, 6, 2))
    out = conv2d(x, layer).data
    xp = np.pad(x, ((2, 2), (2, 2), (0, 0)))
    ref = np.zeros((7, 6, 3))
    for i in range(7):
        for j in range(6):
            for di in range(3):
                for dj in range(3):
                    ref[i, j] += xp[i + 2 * di, j + 2 * dj] @ layer.weight.data[di, dj]
    ref += layer.bias.data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_grouped_conv_matches_split(rng):
    layer = Conv2dLayer(4, 6, 3, groups=2, rng=rng, dtype=F64)
    x = rng.standard_normal((5, 5, 4))
    out = conv2d(x, layer).data
    for g in range(2):
        sub = Conv2dLayer(2, 3, 3, dtype=F64)
        sub.weight.data[:] = layer.weight.data[..., 3 * g:3 * g + 3]
        np.testing.assert_allclose(conv2d(x[..., 2 * g:2 * g + 2], sub).data, out[..., 3 * g:3 * g + 3],
                                   atol=1e-12)


def test_valid_padding_and_stride(rng):
    layer = Conv2dLayer(1, 1, 3, padding="valid", stride=2, rng=rng, dtype=F64)
    assert conv2d(np.zeros((9, 9, 1)), layer).shape == (4, 4, 1)


def test_channel_mismatch_rejected(rng):
    with pytest.raises(ShapeError):
        conv2d(np.zeros((4, 4, 2)), Conv2dLayer(3, 3, 1, rng=rng))


def test_groups_must_divide():
    with pytest.raises(ValueError):
        Conv2dLayer(4, 6, 1, groups=4)


def test_he_init_std():
    layer = Conv2dLayer(64, 64, 3, rng=np.random.default_rng(0), dtype=F64)
    assert layer.weight.data.std() == pytest.approx(np.sqrt(2 / (9 * 64)), rel=0.05)
    assert not np.any(layer.bias.data)


@pytest.mark.parametrize("kw", [dict(k=3), dict(k=3, groups=2), dict(k=5, groups=4), dict(k=3, stride=2),
                                dict(k=3, dilation=2, groups=4)])
def test_conv_gradcheck(kw, rng):
    layer = Conv2dLayer(4, 4, rng=rng, dtype=F64, **kw)
    layer.bias.data[:] = rng.standard_normal(4)
    x = rng.standard_normal((2, 6, 6, 4))
    w = rng.standard_normal(layer(x).shape)
    assert gradcheck(lambda t: T.sum(layer(t) * w), x) < 1e-6
    xt = T.Tensor(x)
    assert gradcheck_params(lambda: T.sum(layer(xt) * w), layer.parameters()) < 1e-6


# -- bicubic ---------------------------------------------------------------

def test_bicubic_identity_and_constant(rng):
    x = rng.standard_normal((4, 5, 2))
    np.testing.assert_array_equal(bicubic_upsample(x, 1).data, x)
    np.testing.assert_allclose(bicubic_upsample(np.full((3, 3, 2), 0.3), 4).data, 0.3, atol=1e-12)


def test_bicubic_ramp_against_scalar_kernel():
    def keys(t, a=-0.5):
        t = abs(t)
        if t <= 1:
            return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
        if t < 2:
            return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
        return 0.0

    src = [0.0, 1.0, 2.0, 3.0]
    ref = []
    for d in range(8):
        pos = (d + 0.5) / 2 - 0.5
        base = int(np.floor(pos))
        ref.append(sum(src[min(max(k, 0), 3)] * keys(pos - k) for k in range(base - 1, base + 3)))
    x = np.array(src)[:, None, None]
    got = bicubic_upsample(x, 2).data[:, 0, 0]
    np.testing.assert_allclose(got, ref, atol=1e-12)
    # frozen values from the scalar evaluation above
    np.testing.assert_allclose(got, [-0.0703125, 0.1796875, 0.7265625, 1.25, 1.75, 2.2734375, 2.8203125, 3.0703125],
                               atol=1e-12)


def test_bicubic_rejects_bad_scale():
    with pytest.raises(ValueError):
        bicubic_upsample(np.zeros((2, 2, 1)), 0)


@given(st.integers(1, 6), st.integers(1, 8))
def test_bicubic_rows_partition_of_unity(n, s):
    np.testing.assert_allclose(bicubic_matrix(n, s).sum(1), 1.0, atol=1e-12)


def test_cubic_kernel_interpolates():
    assert cubic_kernel(0.0) == 1.0
    np.testing.assert_allclose(cubic_kernel([1.0, 2.0, -1.0, 2.5]), 0.0)


def test_bicubic_gradcheck(rng):
    w = rng.standard_normal((12, 8, 2))
    assert gradcheck(lambda t: T.sum(bicubic_upsample(t, 4) * w), rng.standard_normal((3, 2, 2))) < 1e-8


# -- pooling / SE / LKA ----------------------------------------------------

def test_global_avg_pool():
    x = np.zeros((2, 2, 2))
    x[0, :, 1] = 2.0
    x[..., 0] = 5.0
    np.testing.assert_allclose(global_avg_pool(x).data, [5.0, 1.0])
    np.testing.assert_allclose(global_avg_pool(3 * x).data, 3 * global_avg_pool(x).data)


def _zero(module):
    for p in module.parameters():
        p.data[:] = 0.0
    return module


def test_se_zero_input_and_half_gates(rng):
    se = SeLayer(8, rng=rng, dtype=F64)
    assert not np.any(se_forward(np.zeros((3, 3, 8)), se).data)
    _zero(se)
    x = rng.standard_normal((3, 3, 8))
    np.testing.assert_allclose(se_forward(x, se).data, x / 2)


def test_se_saturating_injection(rng):
    se = _zero(SeLayer(8, ratio=1, dtype=F64))
    se.reduce.weight.data[0, 0] = np.eye(8)
    se.expand.weight.data[0, 0] = np.eye(8)
    x = rng.standard_normal((3, 3, 8))
    out = se_forward(x, se, inject=np.full(8, 50.0)).data
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_se_inject_length_checked(rng):
    with pytest.raises(ShapeError):
        se_forward(np.zeros((2, 2, 8)), SeLayer(8, rng=rng), inject=np.zeros(4))


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from([4, 8]), st.integers(0, 1000))
def test_se_lka_shape_and_gate_range(h, w, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((h, w, c))
    se, lka = SeLayer(c, rng=rng, dtype=F64), LkaLayer(c, rng=rng, dtype=F64)
    g = se.gates(x).data
    assert np.all((g > 0) & (g < 1))
    assert se_forward(x, se).shape == x.shape
    assert lka_forward(x, lka).shape == x.shape


def test_se_gate_ordering_under_positive_mask(rng):
    se = SeLayer(8, rng=rng, dtype=F64)
    x = rng.standard_normal((4, 4, 8))
    g = se.gates(x).data.ravel()
    for _ in range(5):
        mask = rng.uniform(0.1, 2.0, 8)
        # the same descriptor (pool of masked x, divided back out) yields the same gates
        desc = global_avg_pool(x * mask).data / mask
        g2 = se.gates(np.broadcast_to(desc, (1, 1, 8))).data.ravel()
        np.testing.assert_array_equal(np.argsort(g2), np.argsort(g))


def test_lka_is_multiplicative_gate(rng):
    lka = LkaLayer(4, rng=rng, dtype=F64)
    x = rng.standard_normal((6, 6, 4))
    np.testing.assert_allclose(lka(x).data, lka.attention(x).data * x)
    assert not np.any(lka(np.zeros((6, 6, 4))).data)
    assert not np.any(_zero(lka)(x).data)


def test_lka_receptive_field(rng):
    lka = LkaLayer(4, rng=rng, dtype=F64)
    H = 48
    x = rng.standard_normal((H, H, 4))
    base = lka.attention(x).data[24, 24]
    # the field spans +-11 pixels: 2 from the 5x5, 9 from the 7x7 dilated by 3
    y = x.copy()
    y[24 + 12, 24] += 10.0
    y[24, 24 - 12] += 10.0
    np.testing.assert_allclose(lka.attention(y).data[24, 24], base, atol=1e-12)
    y = x.copy()
    y[24 + 11, 24 + 11] += 10.0
    assert np.abs(lka.attention(y).data[24, 24] - base).max() > 1e-9
    assert LkaLayer.receptive_field == 23


def test_se_lka_gradcheck(rng):
    se, lka = SeLayer(8, rng=rng, dtype=F64), LkaLayer(8, rng=rng, dtype=F64)
    x = rng.standard_normal((5, 5, 8))
    inj = rng.standard_normal(8)
    w = rng.standard_normal((5, 5, 8))
    assert gradcheck(lambda t: T.sum(se(lka(t), inj) * w), x) < 1e-6
    xt = T.Tensor(x)
    assert gradcheck_params(lambda: T.sum(se(lka(xt), inj) * w), se.parameters() + lka.parameters()) < 1e-6


def test_conv_relu_conv_zero_last(rng):
    m = ConvReluConv(3, 8, 5, zero_last=True, rng=rng, dtype=F64)
    assert not np.any(m(rng.standard_normal((4, 4, 3))).data)
    assert m.num_parameters() == 9 * 3 * 8 + 8 + 9 * 8 * 5 + 5
