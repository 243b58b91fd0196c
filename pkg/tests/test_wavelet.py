import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from piffuse import tensor as T
from piffuse.tensor import ShapeError, gradcheck
from piffuse.wavelet import WaveletPyramid, haar_analyze, haar_synthesize


def test_known_block():
    p = haar_analyze(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
    got = [float(b.data.ravel()[0]) for b in p.bands()]
    assert got == [5.0, -2.0, -1.0, 0.0]


def test_constant_image_only_ll():
    p = haar_analyze(np.full((4, 6, 2), 0.7))
    np.testing.assert_allclose(p.ll.data, 1.4)
    for b in (p.lh, p.hl, p.hh):
        assert not np.any(b.data)


def test_odd_size_rejected():
    with pytest.raises(ShapeError):
        haar_analyze(np.zeros((3, 4, 1)))


def test_subband_shape_mismatch_rejected():
    a = T.Tensor(np.zeros((2, 2, 1)))
    with pytest.raises(ShapeError):
        haar_synthesize(WaveletPyramid(a, a, a, T.Tensor(np.zeros((2, 3, 1)))))


even = st.integers(1, 4).map(lambda k: 2 * k)


@given(even, even, st.integers(1, 3), st.integers(0, 2**31))
def test_perfect_reconstruction_and_energy(h, w, c, seed):
    x = np.random.default_rng(seed).standard_normal((h, w, c))
    p = haar_analyze(x)
    np.testing.assert_allclose(haar_synthesize(p).data, x, atol=1e-12)
    energy = sum(float(np.sum(b.data ** 2)) for b in p.bands())
    assert energy == pytest.approx(float(np.sum(x ** 2)), rel=1e-12)


@given(arrays(np.float64, (2, 4, 4, 2), elements=st.floats(-3, 3)))
def test_batched_matches_unbatched(x):
    pb = haar_analyze(x)
    for i in range(2):
        pi = haar_analyze(x[i])
        for a, b in zip(pb.bands(), pi.bands()):
            np.testing.assert_array_equal(a.data[i], b.data)


def test_gradcheck_through_round_trip(rng):
    w = rng.standard_normal((4, 4, 3))

    def f(t):
        p = haar_analyze(t)
        return T.sum(haar_synthesize(WaveletPyramid(p.ll * 2.0, p.lh, p.hl, p.hh)) * w)

    assert gradcheck(f, rng.standard_normal((4, 4, 3))) < 1e-8
