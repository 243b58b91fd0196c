import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from piffuse.data import (CubeFormatError, SpectralResponse, build_dataset, cube_io, degrade_lrhsi,
                          extract_patches, gaussian_kernel3, read_cube, simulate_hrmsi, synth_scene,
                          write_cube)


def test_constant_cube_degrades_to_constant():
    z = np.full((8, 8, 3), 0.4)
    np.testing.assert_allclose(degrade_lrhsi(z, 4), 0.4)
    assert degrade_lrhsi(z, 4).shape == (2, 2, 3)


def test_impulse_centre_weight():
    z = np.zeros((8, 8, 1))
    z[4, 4] = 1.0
    e = [math.exp(-(i * i + j * j) / (2 * 0.25)) for i in (-1, 0, 1) for j in (-1, 0, 1)]
    centre = 1.0 / sum(e)
    assert degrade_lrhsi(z, 4)[1, 1, 0] == pytest.approx(centre, abs=1e-7)
    assert centre == pytest.approx(0.6193470305571772, abs=1e-12)
    assert gaussian_kernel3().sum() == pytest.approx(1.0)


def test_scale_one_is_pure_blur(rng):
    z = rng.random((6, 6, 2))
    out = degrade_lrhsi(z, 1)
    assert out.shape == z.shape and not np.array_equal(out, z)


def test_indivisible_rejected():
    with pytest.raises(ValueError):
        degrade_lrhsi(np.zeros((6, 6, 1)), 4)


@given(st.integers(0, 1000), st.sampled_from([1, 2, 4]))
def test_degrade_commutes_with_band_selection(seed, s):
    z = np.random.default_rng(seed).random((8, 8, 5))
    full = degrade_lrhsi(z, s)
    for b in range(5):
        np.testing.assert_array_equal(full[..., b], degrade_lrhsi(z[..., b:b + 1], s)[..., 0])


def test_srf_cases(rng):
    z = rng.random((4, 4, 4))
    np.testing.assert_array_equal(simulate_hrmsi(z, SpectralResponse(np.eye(4))), z)
    flat = np.broadcast_to(rng.random((4, 4, 1)), (4, 4, 32))
    y = simulate_hrmsi(flat, SpectralResponse.block_average(4, 32))
    np.testing.assert_allclose(y, np.broadcast_to(flat[..., :1], (4, 4, 4)))
    z = rng.random((3, 3, 32))
    y = simulate_hrmsi(z, SpectralResponse.block_average(4, 32))
    ref = np.array([[sum(z[i, j, k] for k in range(8)) / 8 for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(y[..., 0], ref, atol=1e-12)
    with pytest.raises(ValueError):
        simulate_hrmsi(z, SpectralResponse.block_average(4, 16))


@given(st.integers(1, 8), st.integers(8, 40))
def test_block_srf_row_stochastic(c, C):
    srf = SpectralResponse.block_average(c, C).srf
    np.testing.assert_allclose(srf.sum(1), 1.0, atol=1e-7)
    for row in srf:
        nz = np.flatnonzero(row)
        assert np.all(np.diff(nz) == 1)


def test_srf_validation():
    with pytest.raises(ValueError):
        SpectralResponse(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        SpectralResponse(np.array([[1.5, -0.5]]))


def test_synth_scene_properties():
    a = synth_scene(5, 16, 16, 8)
    b = synth_scene(5, 16, 16, 8)
    assert np.array_equal(a.data, b.data)
    assert a.data.min() == 0.0 and a.data.max() == 1.0
    np.testing.assert_allclose(a.abundances.sum(-1), 1.0, atol=1e-12)
    flat = synth_scene(5, 8, 8, 8, complexity=0)
    assert np.all(flat.data == flat.data[0, 0])
    with pytest.raises(ValueError):
        synth_scene(0, 12, 16, 8)


def test_patch_tiling_and_sizes():
    z = synth_scene(1, 128, 128, 8).data
    srf = SpectralResponse.block_average(4, 8)
    ps = extract_patches(z, 64, 64, 4, srf)
    assert len(ps) == 4
    assert ps[0].x.shape == (16, 16, 8) and ps[0].y.shape == (64, 64, 4)
    assert [p.origin for p in ps] == [(0, 0), (0, 64), (64, 0), (64, 64)]
    with pytest.raises(ValueError):
        extract_patches(z, 256, 64, 4, srf)


def test_train_test_disjoint_and_reproducible():
    tr, te, _ = build_dataset()
    rows_tr = {r for p in tr for r in range(p.origin[0], p.origin[0] + p.z.shape[0])}
    rows_te = {r for p in te for r in range(p.origin[0], p.origin[0] + p.z.shape[0])}
    assert not rows_tr & rows_te
    assert len(tr) == 32
    tr2, _, _ = build_dataset()
    assert all(np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) for a, b in zip(tr, tr2))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_cube_round_trip(tmp_path, rng, dtype):
    x = rng.random((8, 8, 4)).astype(dtype)
    cube_io(tmp_path / "c.hsc", x)
    y = cube_io(tmp_path / "c.hsc")
    assert y.dtype == dtype and y.tobytes() == x.tobytes()


def test_cube_errors(tmp_path, rng):
    p = tmp_path / "c.hsc"
    write_cube(p, rng.random((2, 2, 2)).astype(np.float32))
    buf = p.read_bytes()
    p.write_bytes(buf[:-3])
    with pytest.raises(CubeFormatError, match="expected 32 bytes, got 29"):
        read_cube(p)
    p.write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(CubeFormatError, match="magic"):
        read_cube(p)
    p.write_bytes(buf[:16] + bytes([2]) + buf[17:])
    with pytest.raises(CubeFormatError, match="dtype code 2"):
        read_cube(p)
    assert buf[:4] == b"HSC1" and buf[16] == 0
