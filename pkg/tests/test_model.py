import numpy as np
import pytest

from piffuse import tensor as T
from piffuse.audit import perturb
from piffuse.losses import composite_loss
from piffuse.metrics import psnr
from piffuse.model import (CheckpointError, PifNet, PifNetConfig, load_checkpoint, parameter_count,
                           pifnet_forward, save_checkpoint)
from piffuse.nn import Conv2dLayer, bicubic_upsample
from piffuse.data import build_dataset
from piffuse.tensor import ShapeError, Tensor, gradcheck_params

F64 = np.float64


def micro(**kw):
    base = dict(bands=8, msi_bands=4, scale=2, hidden=8, blocks=1, rank=2, state=4, dtype="float64", seed=3)
    base.update(kw)
    return PifNet(PifNetConfig(**base))


def test_config_validation():
    with pytest.raises(ValueError):
        PifNetConfig(hidden=6)
    with pytest.raises(ValueError):
        PifNetConfig(scale=3)
    with pytest.raises(ValueError):
        PifNetConfig(hidden=8, rank=3)


def test_output_shapes():
    m = PifNet(PifNetConfig(bands=31, msi_bands=3, scale=4, hidden=16, blocks=1, rank=2, state=4))
    rng = np.random.default_rng(0)
    x = rng.random((16, 16, 31)).astype(np.float32)
    y = rng.random((64, 64, 3)).astype(np.float32)
    with T.no_grad():
        z_hat, z_bar, ld = pifnet_forward(x, y, m)
        zb, ld2, hf = m.spectral_branch(x)
    assert z_hat.shape == z_bar.shape == (64, 64, 31)
    assert hf.shape == (32, 32, 16)
    assert ld.item() == ld2.item() == 0.0


def test_scale_mismatch_message(rng):
    m = micro()
    with pytest.raises(ShapeError, match="HR-MSI spatial size"):
        m(rng.random((4, 4, 8)), rng.random((6, 6, 4)))


def test_bicubic_at_init(rng):
    m = micro()
    x = rng.random((4, 4, 8))
    z_hat, z_bar, ld = m(x, rng.random((8, 8, 4)))
    up = bicubic_upsample(x, 2).data
    np.testing.assert_array_equal(z_hat.data, up)
    np.testing.assert_array_equal(z_bar.data, up)
    assert ld.item() == 0.0


def test_smoke_baseline_close_to_bicubic():
    train, test, _ = build_dataset({"max_train": 1})
    ex = test[0]
    m = PifNet(PifNetConfig(bands=16, msi_bands=4, scale=4, hidden=16, blocks=2, rank=2))
    with T.no_grad():
        z_hat = m(ex.x, ex.y)[0].data
    base = psnr(ex.z, bicubic_upsample(ex.x, 4).data)
    assert abs(psnr(ex.z, z_hat) - base) < 1e-3


def test_spectral_logdet_matches_stack(rng):
    m = perturb(micro(blocks=2), rng, 0.05)
    x = rng.random((4, 4, 8))
    with T.no_grad():
        _, ld, _ = m.spectral_branch(x)
        x_up = bicubic_upsample(x, 2)
        from piffuse.wavelet import haar_analyze
        pyr = haar_analyze(m.proj(m.hsi_head(x_up)))
        _, _, ld_stack = m.coupling(m.hf_reduce(pyr.details()), pyr.ll)
    assert ld.item() == ld_stack.item()
    assert ld.item() != 0.0


def test_determinism(rng):
    m = perturb(micro(), rng, 0.05)
    x, y = rng.random((4, 4, 8)), rng.random((8, 8, 4))
    a = m(x, y)[0].data
    b = m(x, y)[0].data
    np.testing.assert_array_equal(a, b)


def test_parameter_counts():
    assert parameter_count(Conv2dLayer(4, 4, 1)) == 20
    m = PifNet(PifNetConfig(bands=103, msi_bands=4, scale=4, hidden=64, blocks=4, rank=4))
    n = parameter_count(m)
    assert 500_000 <= n <= 5_000_000
    assert n == m.num_parameters() == sum(p.size for p in m.parameters())


def test_independent_attention_copies_add_parameters():
    shared = micro()
    sep = micro(share_attention=False)
    assert parameter_count(sep) > parameter_count(shared)


def test_checkpoint_round_trip(tmp_path, rng):
    m = perturb(micro(), rng, 0.05)
    path = tmp_path / "m.pifn"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.cfg == m.cfg
    x, y = rng.random((4, 4, 8)), rng.random((8, 8, 4))
    with T.no_grad():
        np.testing.assert_array_equal(m(x, y)[0].data, m2(x, y)[0].data)
    save_checkpoint(m2, tmp_path / "m2.pifn")
    assert path.read_bytes() == (tmp_path / "m2.pifn").read_bytes()


def test_checkpoint_errors(tmp_path, rng):
    m = micro()
    path = tmp_path / "m.pifn"
    save_checkpoint(m, path)
    buf = path.read_bytes()
    (tmp_path / "bad.pifn").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pifn")
    (tmp_path / "short.pifn").write_bytes(buf[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.pifn")


def test_branch_separability(rng):
    m = perturb(micro(), rng, 0.05)
    x, y, z = rng.random((4, 4, 8)), rng.random((8, 8, 4)), rng.random((8, 8, 8))
    z_hat, z_bar, ld = m(x, y)
    lb = composite_loss(z_hat, z, z_bar.detach(), ld, lambda_cos=0.0, lambda_inv=0.0)
    T.backward(lb.total)
    assert np.abs(m.spatial_tail.conv2.weight.grad).max() > 0
    assert np.abs(m.msi_head.conv1.weight.grad).max() > 0
    assert m.spectral_tail.conv2.weight.grad is None or not np.any(m.spectral_tail.conv2.weight.grad)


def test_end_to_end_gradcheck(rng):
    m = perturb(micro(freeze_second_pass=False), rng, 0.05)
    x, y, z = rng.random((4, 4, 8)), rng.random((8, 8, 4)), rng.random((8, 8, 8))
    n = m.coupled_elements(x.shape)

    def loss():
        z_hat, z_bar, ld = m(x, y)
        return composite_loss(z_hat, z, z_bar, ld, 0.01, 0.1, n).total

    assert gradcheck_params(loss, m.parameters(), max_components=2, floor=1e-6) < 1e-3
