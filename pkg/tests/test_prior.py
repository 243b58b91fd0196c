import numpy as np
import pytest
from hypothesis import given, strategies as st

from piffuse import tensor as T
from piffuse.prior import (HfSemanticPerception, PriorExtractor, extract_prior, hf_semantic_guidance,
                           local_mean3, residue_channel_gate)
from piffuse.tensor import ShapeError, Tensor, gradcheck, gradcheck_params

F64 = np.float64


def test_gate_identical_channels_is_zero(rng):
    x = np.repeat(rng.standard_normal((5, 5, 1)), 4, axis=-1)
    assert not np.any(residue_channel_gate(x).data)


def test_gate_two_constant_channels():
    x = np.stack([np.full((4, 4), 3.0), np.full((4, 4), 1.0)], axis=-1)
    np.testing.assert_allclose(residue_channel_gate(x).data, 2.0)


def brute_gate(x):
    H, W, C = x.shape
    out = np.zeros((H, W, 1))
    for i in range(H):
        for j in range(W):
            win = x[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            m = win.reshape(-1, C).mean(0)
            out[i, j, 0] = m.max() - m.min()
    return out


@given(st.integers(0, 10_000))
def test_gate_matches_brute_force(seed):
    x = np.random.default_rng(seed).standard_normal((5, 4, 3))
    g = residue_channel_gate(x).data
    np.testing.assert_allclose(g, brute_gate(x), atol=1e-12)
    assert np.all(g >= 0)


def test_local_mean_literal_switch(rng):
    x = rng.standard_normal((4, 4, 3))
    np.testing.assert_allclose(residue_channel_gate(x, local_mean=False).data[..., 0],
                               x.max(-1) - x.min(-1))
    np.testing.assert_allclose(local_mean3(Tensor(np.ones((3, 5, 2)))).data, 1.0)


def test_prior_zero_difference(rng):
    p = PriorExtractor(4, rng=rng, dtype=F64)
    x = rng.standard_normal((5, 5, 4))
    assert not np.any(extract_prior(x, x, p).data)


def test_prior_zero_gate(rng):
    p = PriorExtractor(4, rng=rng, dtype=F64)
    xs = np.repeat(rng.standard_normal((5, 5, 1)), 4, axis=-1)
    ys = rng.standard_normal((5, 5, 4))
    assert not np.any(extract_prior(xs, ys, p).data)


@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_prior_linear_in_beta_and_nonnegative(beta, seed):
    rng = np.random.default_rng(seed)
    p = PriorExtractor(4, beta=1.0, rng=rng, dtype=F64)
    p.refine_conv.bias.data[:] = 0.1
    xs, ys = rng.standard_normal((2, 5, 5, 4))
    full = extract_prior(xs, ys, p).data
    p.beta = beta
    part = extract_prior(xs, ys, p).data
    assert np.all(full >= 0)
    np.testing.assert_allclose(part, beta * full, atol=1e-14)


def test_prior_rejects_bad_beta_and_shapes(rng):
    with pytest.raises(ValueError):
        PriorExtractor(4, beta=1.5)
    with pytest.raises(ShapeError):
        PriorExtractor(4, rng=rng)(np.zeros((4, 4, 4)), np.zeros((2, 2, 4)))


def test_guidance_shapes_and_zero(rng):
    m = HfSemanticPerception(16, rng=rng, dtype=F64)
    out = hf_semantic_guidance(rng.standard_normal((8, 8, 16)), rng.standard_normal((16, 16, 16)), m)
    assert out.shape == (16, 16, 16)
    assert not np.any(hf_semantic_guidance(np.zeros((4, 4, 16)), np.zeros((8, 8, 16)), m).data)
    with pytest.raises(ShapeError):
        hf_semantic_guidance(np.zeros((4, 4, 16)), np.zeros((6, 6, 16)), m)


def test_guidance_with_zero_prior_depends_on_hf_only(rng):
    m = HfSemanticPerception(4, rng=rng, dtype=F64)
    h = rng.standard_normal((3, 3, 4))
    a = hf_semantic_guidance(h, np.zeros((6, 6, 4)), m).data
    m.fuse.weight.data[:, :, 4:] = rng.standard_normal(m.fuse.weight.data[:, :, 4:].shape)
    np.testing.assert_array_equal(hf_semantic_guidance(h, np.zeros((6, 6, 4)), m).data, a)


def test_prior_and_guidance_gradcheck(rng):
    p = PriorExtractor(4, rng=rng, dtype=F64)
    m = HfSemanticPerception(4, rng=rng, dtype=F64)
    ys = Tensor(rng.standard_normal((6, 6, 4)))
    hf = Tensor(rng.standard_normal((3, 3, 4)))
    w = rng.standard_normal((6, 6, 4))
    assert gradcheck(lambda t: T.sum(m(hf, p(t, ys)) * w), rng.standard_normal((6, 6, 4))) < 1e-4
    xs = Tensor(rng.standard_normal((6, 6, 4)))
    assert gradcheck_params(lambda: T.sum(m(hf, p(xs, ys)) * w), p.parameters() + m.parameters()) < 1e-4
