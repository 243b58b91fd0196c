import numpy as np
import pytest
from hypothesis import given, strategies as st

from piffuse import ssm
from piffuse import tensor as T
from piffuse.ssm import (SelectiveScanParams, SsmmBlock, scan_orders, selective_scan_1d, selective_scan_op,
                         ss2d_forward, ssmm_forward)
from piffuse.tensor import Tensor, gradcheck, gradcheck_params

F64 = np.float64


def naive_scan(x, delta, A, B, C, D):
    """Direct recurrence for one group/batch: x, delta [T, C]; A [C, N]; B, C [T, N]; D [C]."""
    L, Ch = x.shape
    h = np.zeros(A.shape)
    y = np.zeros_like(x)
    for t in range(L):
        h = np.exp(delta[t][:, None] * A) * h + (delta[t] * x[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t] + D * x[t]
    return y


def _rand_scan(rng, G=2, Bsz=2, L=5, C=3, N=4):
    return (rng.standard_normal((G, Bsz, L, C)), rng.uniform(0.1, 1.0, (G, Bsz, L, C)),
            -rng.uniform(0.1, 2.0, (G, C, N)), rng.standard_normal((G, Bsz, L, N)),
            rng.standard_normal((G, Bsz, L, N)), rng.standard_normal((G, C)))


def test_scan_matches_naive_recurrence(rng):
    x, dt, A, B, C, D = _rand_scan(rng)
    y = selective_scan_op(*map(Tensor, (x, dt, A, B, C, D))).data
    for g in range(2):
        for b in range(2):
            np.testing.assert_allclose(y[g, b], naive_scan(x[g, b], dt[g, b], A[g], B[g, b], C[g, b], D[g]),
                                       atol=1e-12)


def test_prefix_sums():
    x = np.array([1.0, 2.0, 3.0, 4.0])[None, None, :, None]
    ones = np.ones((1, 1, 4, 1))
    y = selective_scan_op(Tensor(x), Tensor(ones), Tensor(np.zeros((1, 1, 1))), Tensor(ones), Tensor(ones),
                          Tensor(np.zeros((1, 1)))).data.ravel()
    np.testing.assert_allclose(y, [1.0, 3.0, 6.0, 10.0])


def test_single_step_has_no_history(rng):
    p = SelectiveScanParams(3, 4, rng=rng, dtype=F64)
    x = rng.standard_normal((1, 3))
    y = selective_scan_1d(x, p).data[0]
    delta = np.log1p(np.exp(x[0] @ p.w_delta.data + p.b_delta.data))
    Bv, Cv = x[0] @ p.w_b.data, x[0] @ p.w_c.data
    np.testing.assert_allclose(y, (Cv @ Bv) * delta * x[0] + p.d.data * x[0], atol=1e-12)


def test_zero_input_zero_output(rng):
    p = SelectiveScanParams(4, rng=rng, dtype=F64)
    assert not np.any(selective_scan_1d(np.zeros((6, 4)), p).data)
    assert not np.any(ss2d_forward(np.zeros((3, 3, 4)), [p] * 4).data)


def test_decay_in_unit_interval(rng):
    p = SelectiveScanParams(4, rng=rng, dtype=F64)
    a = -np.exp(p.log_a.data)
    assert np.all(a < 0)
    delta = np.log1p(np.exp(p.b_delta.data))
    np.testing.assert_allclose(delta, 0.5)
    dA = np.exp(delta[:, None] * a)
    assert np.all((dA > 0) & (dA <= 1))


def test_scan_orders_are_permutations():
    for o in scan_orders(3, 5):
        assert sorted(o.tolist()) == list(range(15))


def test_ss2d_single_pixel_equals_single_step(rng):
    p = SelectiveScanParams(4, rng=rng, dtype=F64)
    x = rng.standard_normal((1, 1, 4))
    np.testing.assert_allclose(ss2d_forward(x, [p] * 4).data[0, 0], selective_scan_1d(x[0], p).data[0],
                               atol=1e-12)


@given(st.integers(0, 10_000))
def test_ss2d_transpose_and_rot180_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = SelectiveScanParams(4, rng=rng, dtype=F64)
    x = rng.standard_normal((3, 4, 4))
    y = ss2d_forward(x, [p] * 4).data
    np.testing.assert_allclose(ss2d_forward(x.transpose(1, 0, 2), [p] * 4).data, y.transpose(1, 0, 2),
                               atol=1e-10)
    np.testing.assert_allclose(ss2d_forward(x[::-1, ::-1], [p] * 4).data, y[::-1, ::-1], atol=1e-10)


def test_ss2d_is_mean_of_directions(rng):
    ps = [SelectiveScanParams(2, rng=rng, dtype=F64) for _ in range(4)]
    x = rng.standard_normal((3, 2, 2))
    flat = x.reshape(6, 2)
    acc = np.zeros_like(flat)
    for o, p in zip(scan_orders(3, 2), ps):
        out = np.zeros_like(flat)
        out[o] = selective_scan_1d(flat[o], p).data
        acc += out
    np.testing.assert_allclose(ss2d_forward(x, ps).data, (acc / 4).reshape(3, 2, 2), atol=1e-12)


def test_ssmm_identity_at_init_and_shape(rng):
    b = SsmmBlock(16, rng=rng, dtype=F64)
    x = rng.standard_normal((8, 8, 16))
    np.testing.assert_array_equal(ssmm_forward(x, b).data, x)
    with pytest.raises(ValueError):
        SsmmBlock(6)


def test_ssmm_segments_are_local_before_fuse(rng):
    b = SsmmBlock(8, rng=rng, dtype=F64)
    x = rng.standard_normal((4, 4, 8))
    x2 = x.copy()
    x2[..., 4:6] = 0.0
    delta = b.scan_features(x2).data - b.scan_features(x).data
    assert np.abs(delta[..., 4:6]).max() > 0
    assert not np.any(delta[..., :4]) and not np.any(delta[..., 6:])


def test_scan_work_is_linear():
    p = SelectiveScanParams(2, 4, rng=np.random.default_rng(0), dtype=F64)
    counts = []
    for side in (4, 8):
        before = ssm.scan_work["updates"]
        ss2d_forward(np.ones((side, side, 2)), [p] * 4)
        counts.append(ssm.scan_work["updates"] - before)
    hw = [16, 64]
    assert counts[1] / counts[0] == hw[1] / hw[0]


def test_long_scan_stays_bounded(rng):
    x = rng.uniform(-1, 1, (1, 1, 4096, 2))
    dt = np.full_like(x, 0.5)
    A = -np.ones((1, 2, 4)) * 0.01
    B = np.ones((1, 1, 4096, 4))
    y = selective_scan_op(Tensor(x), Tensor(dt), Tensor(A), Tensor(B), Tensor(B), Tensor(np.zeros((1, 2)))).data
    assert np.all(np.isfinite(y))
    # |h| <= dt*|B|*max|x| / (1 - exp(dt*a)) per state, summed over N through C
    bound = 4 * 0.5 / (1 - np.exp(-0.005))
    assert np.abs(y).max() <= bound


def test_scan_gradcheck(rng):
    x, dt, A, B, C, D = _rand_scan(rng, L=4)
    ts = [T.Parameter(a, dtype=F64) for a in (x, dt, A, B, C, D)]
    w = rng.standard_normal(x.shape)
    assert gradcheck_params(lambda: T.sum(selective_scan_op(*ts) * w), ts) < 1e-6


def test_ssmm_gradcheck(rng):
    b = SsmmBlock(8, state=4, zero_fuse=False, rng=rng, dtype=F64)
    x = rng.standard_normal((4, 4, 8))
    w = rng.standard_normal((4, 4, 8))
    assert gradcheck(lambda t: T.sum(b(t) * w), x, max_components=48, rng=rng) < 1e-4
    xt = Tensor(x)
    assert gradcheck_params(lambda: T.sum(b(xt) * w), b.parameters(), max_components=8) < 1e-4
