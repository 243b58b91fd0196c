"""Self-checks: invertibility, log-det, gradients, identity-at-init, freezing,
metric oracles and file formats.  Each suite returns a list of ``Check``.

The CLI ``audit`` command runs every suite; tests call them one by one.
"""

from __future__ import annotations

import io
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .coupling import CouplingBlock, CouplingStack
from .data import (SpectralResponse, blur3, degrade_lrhsi, gaussian_kernel3, read_cube,
                   simulate_hrmsi, synth_scene, write_cube)
from .famlora import FamLoraBlock, LoraHead, multihead_lora
from .losses import composite_loss, cosine_loss, invertibility_loss, l1_loss
from .metrics import ergas, gaussian_window, psnr, sam, ssim
from .model import PifNet, PifNetConfig, load_checkpoint, save_checkpoint
from .nn import Conv2dLayer, LkaLayer, Module, SeLayer, bicubic_upsample, conv2d_op
from .prior import HfSemanticPerception, PriorExtractor
from .ssm import SelectiveScanParams, SsmmBlock, selective_scan_1d, selective_scan_op
from .tensor import Parameter
from .train import TrainState, adamw_step, lr_schedule
from .wavelet import haar_analyze, haar_synthesize

F64 = np.float64


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    value: float | None = None
    limit: float | None = None
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        num = ""
        if self.value is not None:
            num = f" value={self.value:.3e}" + (f" limit={self.limit:.1e}" if self.limit is not None else "")
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{tag}] {self.suite}: {self.name}{num}{extra}"


def _below(suite, name, value, limit, detail="") -> Check:
    value = float(value)
    return Check(suite, name, bool(np.isfinite(value) and value < limit), value, limit, detail)


def _true(suite, name, cond, detail="") -> Check:
    return Check(suite, name, bool(cond), detail=detail)


def perturb(module: Module, rng, std: float = 0.3) -> Module:
    """Add Gaussian noise to every parameter (breaks zero-init symmetry)."""
    for p in module.parameters():
        p.data += rng.normal(0, std, p.shape).astype(p.dtype)
    return module


# ---------------------------------------------------------------------------
# wavelet
# ---------------------------------------------------------------------------

def wavelet_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for dt, tol in ((np.float32, 1e-6), (np.float64, 1e-12)):
        x = rng.standard_normal((64, 64, 8)).astype(dt)
        pyr = haar_analyze(x)
        rec = haar_synthesize(pyr).data
        out.append(_below("wavelet", f"perfect reconstruction {np.dtype(dt).name}",
                          np.abs(rec - x).max(), tol))
        e_in = float(np.sum(x.astype(F64) ** 2))
        e_out = sum(float(np.sum(b.data.astype(F64) ** 2)) for b in pyr.bands())
        out.append(_below("wavelet", f"energy preservation {np.dtype(dt).name}",
                          abs(e_out - e_in) / e_in, 1e-5))
    ex = haar_analyze(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
    got = [float(b.data.ravel()[0]) for b in ex.bands()]
    out.append(_true("wavelet", "2x2 block [[1,2],[3,4]] -> (5, -2, -1, 0)",
                     np.allclose(got, [5.0, -2.0, -1.0, 0.0]), str(got)))
    return out


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------

def coupling_inverse_suite(n: int = 100, seed: int = 0) -> list[Check]:
    """Random blocks and inputs [8, 8, 8]: forward then inverse."""
    out = []
    for dt, tol in ((np.float32, 1e-4), (np.float64, 1e-9)):
        rng = np.random.default_rng(seed)
        worst = 0.0
        with T.no_grad():
            for _ in range(n):
                blk = perturb(CouplingBlock(8, state=4, rng=rng, dtype=dt), rng, 0.3)
                xh = rng.standard_normal((8, 8, 8)).astype(dt)
                xl = rng.standard_normal((8, 8, 8)).astype(dt)
                yh, yl, _ = blk.forward(xh, xl)
                rh, rl = blk.inverse(yh, yl)
                worst = max(worst, float(np.abs(rh.data - xh).max()), float(np.abs(rl.data - xl).max()))
        out.append(_below("coupling", f"{n} random blocks invert ({np.dtype(dt).name})", worst, tol))
    rng = np.random.default_rng(seed + 1)
    stack = CouplingStack.build(3, 8, state=4, rng=rng, dtype=F64)
    xh, xl = rng.standard_normal((2, 8, 8, 8)), rng.standard_normal((2, 8, 8, 8))
    with T.no_grad():
        yh, yl, ld = stack.forward(xh, xl)
        perturb(stack, rng)
        ph, pl, _ = stack.forward(xh, xl)
        rh, rl = stack.inverse(ph, pl)
    out.append(_true("coupling", "fresh stack is identity with logdet 0",
                     np.array_equal(yh.data, xh) and np.array_equal(yl.data, xl) and not ld.data.any()))
    out.append(_below("coupling", "perturbed 3-block stack inverts (f64)",
                      max(np.abs(rh.data - xh).max(), np.abs(rl.data - xl).max()), 1e-9))
    return out


def _fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    n = x.size
    J = np.empty((n, n))
    flat = x.reshape(-1)
    for i in range(n):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x).reshape(-1)
        flat[i] = old - eps
        fm = f(x).reshape(-1)
        flat[i] = old
        J[:, i] = (fp - fm) / (2 * eps)
    return J


class _Const(Module):
    def __init__(self, value: float):
        self.value = value

    def forward(self, x):
        return T.Tensor(np.full(x.shape, self.value))


class _Zero(_Const):
    def __init__(self):
        super().__init__(0.0)


def logdet_suite(seed: int = 0, cases: int = 5) -> list[Check]:
    """Analytic log-det vs log|det| of a finite-difference Jacobian (32 elements)."""
    rng = np.random.default_rng(seed)
    shape = (2, 2, 4)          # xh and xl together hold 32 elements
    n_half = int(np.prod(shape))
    out = []

    def joint(blocks):
        def f(v):
            xh, xl = v[:n_half].reshape(shape), v[n_half:].reshape(shape)
            for b in blocks:
                xh, xl, _ = b.forward(xh, xl)
                xh, xl = xh.data, xl.data
            return np.concatenate([xh.ravel(), xl.ravel()])
        return f

    worst = 0.0
    with T.no_grad():
        for _ in range(cases):
            blocks = [perturb(CouplingBlock(4, state=2, rng=rng, dtype=F64), rng, 0.5) for _ in range(2)]
            v = rng.standard_normal(2 * n_half)
            ld = CouplingStack(blocks).forward(v[:n_half].reshape(shape), v[n_half:].reshape(shape))[2]
            J = _fd_jacobian(joint(blocks), v.copy())
            ref = np.linalg.slogdet(J)[1]
            worst = max(worst, abs(float(ld.data) - ref) / max(abs(ref), 1e-12))
    out.append(_below("logdet", f"{cases} random 2-block stacks vs FD Jacobian", worst, 1e-3))

    c = 0.7
    blk = CouplingBlock(alpha=2.0, i1=_Zero(), i2=_Const(c), i3=_Zero())
    v = rng.standard_normal(2 * n_half)
    with T.no_grad():
        ld = float(blk.forward(v[:n_half].reshape(shape), v[n_half:].reshape(shape))[2].data)
        J = _fd_jacobian(joint([blk]), v.copy())
    s = 2.0 * math.tanh(c / 2.0)
    expected = s * n_half
    ref = np.linalg.slogdet(J)[1]
    out.append(_below("logdet", "constant scale: logdet = s * elements(X_L)",
                      abs(ld - expected) / expected, 1e-12, f"s={s:.4f}"))
    out.append(_below("logdet", "constant scale vs FD Jacobian", abs(ld - ref) / abs(ref), 1e-3))
    return out


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _inputs(rng, *shapes, low=None):
    if low is None:
        return [Parameter(rng.standard_normal(s), dtype=F64) for s in shapes]
    return [Parameter(rng.uniform(low, 1.0, s), dtype=F64) for s in shapes]


def _probe(fn, inputs, params, rng, max_components=24):
    """gradcheck of sum(fn(*inputs) * R) for a fixed random R."""
    with T.no_grad():
        shape = fn(*inputs).shape
    R = rng.standard_normal(shape)
    return T.gradcheck_params(lambda: T.sum(fn(*inputs) * R), list(inputs) + list(params),
                              eps=1e-6, max_components=max_components, rng=np.random.default_rng(1))


def gradient_suite(seed: int = 0, tol: float = 1e-4, e2e_tol: float = 1e-3) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []

    def add(name, fn, inputs, params=(), limit=tol, **kw):
        t0 = time.perf_counter()
        err = _probe(fn, inputs, params, rng, **kw)
        out.append(_below("gradcheck", name, err, limit, f"{time.perf_counter() - t0:.2f}s"))

    # convolution variants
    for label, (cin, cout, k, st, dil, g) in {
        "conv 3x3": (3, 5, 3, 1, 1, 1), "conv 1x1": (4, 3, 1, 1, 1, 1),
        "conv stride 2": (3, 4, 3, 2, 1, 1), "conv depthwise dilated": (4, 4, 7, 1, 3, 4),
        "conv grouped": (4, 6, 3, 1, 1, 2),
    }.items():
        x, w, b = _inputs(rng, (2, 9, 9, cin), (k, k, cin // g, cout), (cout,))
        add(label, lambda x, w, b, st=st, dil=dil, g=g: conv2d_op(x, w, b, st, dil, g), [x, w, b])
    x, = _inputs(rng, (1, 5, 6, 3))
    add("bicubic x2", lambda x: bicubic_upsample(x, 2), [x])
    x, = _inputs(rng, (6, 4, 2))
    add("bicubic x4", lambda x: bicubic_upsample(x, 4), [x])
    x, = _inputs(rng, (8, 8, 3))
    add("haar analysis", lambda x: T.concat([haar_analyze(x).ll, haar_analyze(x).details()], axis=-1), [x])

    se = perturb(SeLayer(8, 4, rng=rng, dtype=F64), rng, 0.1)
    x, inj = _inputs(rng, (2, 5, 5, 8), (2, 8))
    add("SE with injection", lambda x, inj: se(x, inject=inj), [x, inj], se.parameters())
    lka = LkaLayer(4, rng=rng, dtype=F64)
    x, = _inputs(rng, (1, 9, 9, 4))
    add("LKA", lambda x: lka(x), [x], lka.parameters())

    p = perturb(SelectiveScanParams(3, 4, rng=rng, dtype=F64), rng, 0.1)
    x, = _inputs(rng, (7, 3))
    add("selective scan 1d", lambda x: selective_scan_1d(x, p), [x], p.parameters())
    x, Bm, Cm = _inputs(rng, (2, 2, 6, 3), (2, 2, 6, 4), (2, 2, 6, 4))
    dl, = _inputs(rng, (2, 2, 6, 3), low=0.1)
    A = Parameter(-rng.uniform(0.2, 2.0, (2, 3, 4)), dtype=F64)
    D, = _inputs(rng, (2, 3))
    add("selective scan kernel", selective_scan_op, [x, dl, A, Bm, Cm, D])

    ssmm = perturb(SsmmBlock(8, 2, rng=rng, dtype=F64), rng, 0.1)
    x, = _inputs(rng, (1, 4, 4, 8))
    add("SSMM", lambda x: ssmm(x), [x], ssmm.parameters(), max_components=8)

    blk = perturb(CouplingBlock(4, state=2, rng=rng, dtype=F64), rng, 0.2)
    xh, xl = _inputs(rng, (1, 4, 4, 4), (1, 4, 4, 4))

    def coup(xh, xl):
        a, b, ld = blk.forward(xh, xl)
        return T.concat([T.reshape(a, (-1,)), T.reshape(b, (-1,)), ld], axis=0)
    add("coupling block (+logdet)", coup, [xh, xl], blk.parameters(), max_components=6)

    pr = perturb(PriorExtractor(4, 0.8, rng=rng, dtype=F64), rng, 0.1)
    xs, ys = _inputs(rng, (1, 6, 6, 4), (1, 6, 6, 4))
    add("prior extractor", lambda a, b: pr(a, b), [xs, ys], pr.parameters())
    hf = HfSemanticPerception(4, rng=rng, dtype=F64)
    xh, xr = _inputs(rng, (1, 3, 3, 4), (1, 6, 6, 4))
    add("HF semantic guidance", lambda a, b: hf(a, b), [xh, xr], hf.parameters())

    fam = perturb(FamLoraBlock(8, 2, rng=rng, dtype=F64), rng, 0.1)
    fam.pass2_frozen = False
    y, xr = _inputs(rng, (1, 6, 6, 8), (1, 6, 6, 8))
    add("FAM-LoRA (unfrozen control)", lambda a, b: fam(a, b), [y, xr], fam.parameters(),
        max_components=8)

    zh, z, zb = _inputs(rng, (2, 4, 4, 3), (2, 4, 4, 3), (2, 4, 4, 3))
    ld, = _inputs(rng, (2,))
    add("loss L1", lambda a, b: l1_loss(a, b), [zh, z])
    add("loss |logdet|/n", lambda a: invertibility_loss(a, 10), [ld])
    add("loss cosine (global)", lambda a, b: cosine_loss(a, b), [zb, zh])
    add("loss cosine (per pixel)", lambda a, b: cosine_loss(a, b, per_pixel=True), [zb, zh])
    add("composite loss", lambda a, b, c, d: composite_loss(a, b, c, d, 0.01, 0.1, 10).total,
        [zh, z, zb, ld])

    # unfrozen control: with the stop-gradient active, backward is (by design)
    # not the derivative of the forward map
    cfg = PifNetConfig(bands=4, msi_bands=2, scale=2, hidden=8, blocks=1, rank=2, state=2,
                       freeze_second_pass=False, dtype="float64", seed=seed)
    model = perturb(PifNet(cfg), rng, 0.05)
    x = rng.random((1, 4, 4, 4))
    y = rng.random((1, 8, 8, 2))
    z = rng.random((1, 8, 8, 4))
    n = model.coupled_elements(x.shape)

    def e2e():
        zh, zb, ld = model(x, y)
        return composite_loss(zh, z, zb, ld, 0.01, 0.1, n).total
    t0 = time.perf_counter()
    err = T.gradcheck_params(e2e, model.parameters(), eps=1e-6, max_components=4,
                             rng=np.random.default_rng(2), floor=1e-6)
    out.append(_below("gradcheck", "end-to-end micro model", err, e2e_tol,
                      f"{time.perf_counter() - t0:.2f}s"))
    return out


# ---------------------------------------------------------------------------
# identity at init and the freeze contract
# ---------------------------------------------------------------------------

def identity_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    y = rng.standard_normal((2, 8, 8, 16)).astype(np.float32)
    xr = rng.standard_normal((2, 8, 8, 16)).astype(np.float32)
    with T.no_grad():
        fam = FamLoraBlock(16, 4, rng=rng)
        out.append(_true("identity", "fresh FAM-LoRA block returns its input", np.array_equal(fam(y, xr).data, y)))
        heads = [LoraHead(4, 4, rng) for _ in range(4)]
        out.append(_true("identity", "fresh LoRA heads contribute zero",
                         np.array_equal(multihead_lora(y, heads).data, y)
                         and all(not h(y[..., :4]).data.any() for h in heads)))
        stack = CouplingStack.build(2, 16, rng=rng)
        a, b, ld = stack.forward(y, xr)
        out.append(_true("identity", "fresh coupling stack is identity with logdet 0",
                         np.array_equal(a.data, y) and np.array_equal(b.data, xr) and not ld.data.any()))
    return out


def _attention_grads(block: FamLoraBlock, y, xr, R) -> dict[str, np.ndarray]:
    params = block.lka.parameters() + block.se.parameters()
    block.zero_grad()
    T.backward(T.sum(block(y, xr) * R))
    return {id(p): p.grad.copy() for p in params}


def freeze_suite(seed: int = 0) -> list[Check]:
    """Frozen-config attention grads == full grads minus the pass-2-only grads."""
    rng = np.random.default_rng(seed)
    out = []
    blk = perturb(FamLoraBlock(8, 2, rng=rng, dtype=F64), rng, 0.2)
    y = rng.standard_normal((1, 6, 6, 8))
    xr = rng.standard_normal((1, 6, 6, 8))
    R = rng.standard_normal((1, 6, 6, 8))
    out.append(_true("freeze", "default block reports pass2_frozen", FamLoraBlock(8, 2).pass2_frozen))
    frozen = _attention_grads(blk, y, xr, R)
    blk.pass2_frozen = False
    full = _attention_grads(blk, y, xr, R)
    blk._detach_pass1 = True
    pass2_only = _attention_grads(blk, y, xr, R)
    blk._detach_pass1, blk.pass2_frozen = False, True
    diff = max(float(np.abs(frozen[k] - (full[k] - pass2_only[k])).max()) for k in frozen)
    scale = max(float(np.abs(full[k]).max()) for k in full)
    out.append(_below("freeze", "frozen grads == full - pass-2 contribution", diff / scale, 1e-10))
    moved = max(float(np.abs(full[k] - frozen[k]).max()) for k in full)
    out.append(_true("freeze", "unfreezing changes the attention grads", moved > 1e-8 * scale,
                     f"max change {moved:.2e}"))

    # frozen parameters are never written by the optimizer, even with gradients
    att = blk.lka.parameters() + blk.se.parameters()
    for p in att:
        p.frozen = True
    before = [p.data.copy() for p in att]
    blk.zero_grad()
    T.backward(T.sum(blk(y, xr) * R))
    state = TrainState(blk.parameters(), base_lr=1e-2)
    grads = [np.ones_like(p.data) if p.grad is None else p.grad + 1.0 for p in state.params]
    adamw_step(state, grads)
    unchanged = all(np.array_equal(b, p.data) for b, p in zip(before, att))
    for p in att:
        p.frozen = False
    out.append(_true("freeze", "adamw_step leaves frozen attention parameters untouched", unchanged))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _sam_reference(a, b) -> float:
    total = 0.0
    H, W, C = a.shape
    for i in range(H):
        for j in range(W):
            pa = [np.longdouble(v) for v in a[i, j]]
            pb = [np.longdouble(v) for v in b[i, j]]
            dot = sum(u * v for u, v in zip(pa, pb))
            na = np.sqrt(sum(u * u for u in pa))
            nb = np.sqrt(sum(v * v for v in pb))
            if na == 0 or nb == 0:
                continue
            c = min(max(dot / (na * nb), np.longdouble(-1)), np.longdouble(1))
            total += float(np.degrees(np.arccos(c)))
    return total / (H * W)


def _ssim_reference(a, b, peak=1.0) -> float:
    g = gaussian_window(11, 1.5)
    w2 = np.outer(g, g)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for band in range(a.shape[2]):
        acc = []
        for i in range(a.shape[0] - 10):
            for j in range(a.shape[1] - 10):
                pa, pb = a[i:i + 11, j:j + 11, band], b[i:i + 11, j:j + 11, band]
                mx, my = (w2 * pa).sum(), (w2 * pb).sum()
                vx = (w2 * (pa - mx) ** 2).sum()
                vy = (w2 * (pb - my) ** 2).sum()
                cxy = (w2 * (pa - mx) * (pb - my)).sum()
                acc.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
        vals.append(np.mean(acc))
    return float(np.mean(vals))


def _ergas_reference(ref, est, s) -> float:
    C = ref.shape[2]
    terms = []
    for band in range(C):
        r, e = ref[..., band].ravel(), est[..., band].ravel()
        mse = sum((float(u) - float(v)) ** 2 for u, v in zip(r, e)) / len(r)
        mu = sum(float(u) for u in r) / len(r)
        terms.append(mse / mu ** 2)
    return 100.0 / s * math.sqrt(sum(terms) / C)


def _psnr_reference(a, b, peak=1.0) -> float:
    mse = sum((float(u) - float(v)) ** 2 for u, v in zip(a.ravel(), b.ravel())) / a.size
    return 10 * math.log10(peak ** 2 / mse)


def metric_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    a = rng.random((8, 8, 4))
    out.append(_below("metrics", "PSNR uniform error 0.5 = 6.0206 dB",
                      abs(psnr(a, a + 0.5) - 6.0206), 1e-3))
    out.append(_below("metrics", "halving uniform error adds 20log10(2) dB",
                      abs(psnr(a, a + 0.25) - psnr(a, a + 0.5) - 20 * math.log10(2)), 1e-9))
    out.append(_true("metrics", "PSNR of identical inputs is capped at 100", psnr(a, a) == 100.0))
    b = rng.random((8, 8, 4))
    out.append(_below("metrics", "SAM scale invariance (b vs 3b)", abs(sam(a, b)[0] - sam(a, 3 * b)[0]), 1e-4))
    out.append(_below("metrics", "SAM of a vs 3a is 0", sam(a, 3 * a)[0], 1e-4))
    e1 = np.zeros((2, 2, 2)); e1[..., 0] = 1
    e2 = np.zeros((2, 2, 2)); e2[..., 1] = 1
    out.append(_below("metrics", "SAM orthogonal spectra = 90 deg", abs(sam(e1, e2)[0] - 90.0), 1e-4))
    out.append(_below("metrics", "ERGAS closed form (ref 2, est 2.2, s 4) = 2.5",
                      abs(ergas(np.full((4, 4, 1), 2.0), np.full((4, 4, 1), 2.2), 4) - 2.5), 1e-6))
    c = rng.random((16, 16, 2))
    d = np.clip(c + 0.1 * rng.standard_normal(c.shape), 0, 1)
    out.append(_below("metrics", "SSIM self-comparison = 1", abs(ssim(c, c) - 1.0), 1e-12))
    out.append(_below("metrics", "SSIM symmetric", abs(ssim(c, d) - ssim(d, c)), 1e-12))
    out.append(_true("metrics", "SSIM < 1 under a constant offset", ssim(c, c + 0.2) < 1.0))
    # independent scalar loops
    p1, p2 = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    out.append(_below("metrics", "SAM vs extended-precision loop", abs(sam(p1, p2)[0] - _sam_reference(p1, p2)), 1e-4))
    out.append(_below("metrics", "SSIM vs sliding-window loop", abs(ssim(c, d) - _ssim_reference(c, d)), 1e-6))
    out.append(_below("metrics", "ERGAS vs scalar loop", abs(ergas(p1, p2, 4) - _ergas_reference(p1, p2, 4)), 1e-9))
    out.append(_below("metrics", "PSNR vs scalar loop", abs(psnr(p1, p2) - _psnr_reference(p1, p2)), 1e-9))
    return out


# ---------------------------------------------------------------------------
# data, formats, reproducibility
# ---------------------------------------------------------------------------

def data_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    z = synth_scene(seed, 32, 32, 8).data
    out.append(_true("data", "synthetic scene is deterministic", np.array_equal(z, synth_scene(seed, 32, 32, 8).data)))
    out.append(_true("data", "scene normalised to [0, 1]", z.min() == 0.0 and z.max() == 1.0))
    lr_all = degrade_lrhsi(z, 4)
    out.append(_true("data", "degradation commutes with band selection",
                     np.array_equal(lr_all[..., 3:4], degrade_lrhsi(z[..., 3:4], 4))))
    imp = np.zeros((8, 8, 1), dtype=F64)
    imp[4, 4, 0] = 1.0
    k = np.exp(-np.array([[2, 1, 2], [1, 0, 1], [2, 1, 2]]) / (2 * 0.25))
    out.append(_below("data", "impulse response equals the closed-form kernel centre",
                      abs(degrade_lrhsi(imp, 4)[1, 1, 0] - 1.0 / k.sum()), 1e-12))
    srf = SpectralResponse.block_average(4, 32)
    out.append(_below("data", "SRF rows sum to 1", np.abs(srf.srf.sum(1) - 1).max(), 1e-7))
    cube = rng.random((4, 4, 32))
    out.append(_below("data", "block SRF band 0 = mean of bands 0-7",
                      np.abs(simulate_hrmsi(cube, srf)[..., 0] - cube[..., :8].mean(-1)).max(), 1e-12))
    const = np.full((8, 8, 3), 0.3)
    out.append(_below("data", "constant cube blurs to itself", np.abs(blur3(const) - 0.3).max(), 1e-12))
    out.append(_below("data", "3x3 kernel normalised", abs(gaussian_kernel3().sum() - 1.0), 1e-12))
    return out


def format_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for dt in (np.float32, np.float64):
            cube = rng.standard_normal((8, 8, 4)).astype(dt)
            write_cube(tmp / "c.hsc", cube)
            back = read_cube(tmp / "c.hsc")
            out.append(_true("formats", f"HSC1 round trip ({np.dtype(dt).name})",
                             back.dtype == cube.dtype and back.tobytes() == cube.tobytes()))
        cfg = PifNetConfig(bands=8, msi_bands=4, scale=2, hidden=8, blocks=1, rank=2, state=2, seed=seed)
        model = perturb(PifNet(cfg), rng, 0.1)
        save_checkpoint(model, tmp / "m.pifn")
        loaded = load_checkpoint(tmp / "m.pifn")
        same = all(a[0] == b[0] and a[1].data.tobytes() == b[1].data.tobytes()
                   for a, b in zip(model.named_parameters(), loaded.named_parameters()))
        out.append(_true("formats", "checkpoint round trip is bit-exact",
                         same and loaded.cfg == model.cfg
                         and (tmp / "m.pifn").read_bytes() == _resave(loaded, tmp / "m2.pifn")))
    return out


def _resave(model, path) -> bytes:
    save_checkpoint(model, path)
    return Path(path).read_bytes()


def reproducibility_suite(steps: int = 3) -> list[Check]:
    """Two identical micro runs produce bit-identical loss curves and metrics."""
    from .train import desk_profile, train
    cfg = desk_profile(max_steps=steps, eval_every=0, hidden=8, blocks=1,
                       manifest_overrides={"scene": {"seed": 3, "height": 64, "width": 64,
                                                     "bands": 16, "complexity": 3},
                                           "test_rows": 32, "max_train": 16})
    a = train(cfg, write=False, quiet=True)
    b = train(cfg, write=False, quiet=True)
    same = [r["total"] for r in a.losses] == [r["total"] for r in b.losses]
    return [_true("repro", f"identical config+seed -> identical {steps}-step loss curve", same),
            _true("repro", "identical final metrics", all(
                getattr(a.report, k) == getattr(b.report, k) for k in ("psnr", "ssim", "sam", "ergas", "params")))]


def misc_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    out.append(_true("train", "lr schedule halves every 200 epochs",
                     all(lr_schedule(1e-4, e) == 1e-4 * 0.5 ** (e // 200) for e in (0, 199, 200, 399, 400, 999))))
    p = Parameter(np.array([1.0, -2.0]))
    st = TrainState([p], base_lr=0.1, weight_decay=0.0)
    adamw_step(st, [np.zeros(2)])
    out.append(_true("train", "zero grads with wd=0 leave parameters unchanged", np.array_equal(p.data, [1.0, -2.0])))
    st = TrainState([p], base_lr=0.1, weight_decay=0.0)
    adamw_step(st, [np.array([3.0, -5.0])])
    out.append(_below("train", "first step moves by -lr*sign(g)", np.abs(p.data - [0.9, -1.9]).max(), 1e-6))
    conv = Conv2dLayer(4, 4, 1)
    out.append(_true("model", "1x1 conv 4->4 with bias has 20 parameters", conv.num_parameters() == 20))
    out.append(_true("model", "LoRA head C=16, r=4 has 32 parameters", LoraHead(4, 4).num_parameters() == 32))
    cfg = PifNetConfig(bands=8, msi_bands=3, scale=4, hidden=8, blocks=1, rank=2, state=2)
    m = PifNet(cfg)
    x = rng.random((1, 4, 4, 8)).astype(np.float32)
    y = rng.random((1, 16, 16, 3)).astype(np.float32)
    with T.no_grad():
        a = m(x, y)
        b = m(x, y)
        up = bicubic_upsample(x, 4).data
    out.append(_true("model", "forward shapes", a[0].shape == (1, 16, 16, 8) and a[1].shape == (1, 16, 16, 8)))
    out.append(_true("model", "forward is deterministic", all(np.array_equal(u.data, v.data) for u, v in zip(a, b))))
    out.append(_true("model", "fresh model outputs the bicubic upsample",
                     np.allclose(a[0].data, up, atol=1e-6) and np.allclose(a[1].data, up, atol=1e-6)))
    return out


SUITES: dict[str, Callable[[], list[Check]]] = {
    "wavelet": wavelet_suite,
    "coupling": coupling_inverse_suite,
    "logdet": logdet_suite,
    "gradcheck": gradient_suite,
    "identity": identity_suite,
    "freeze": freeze_suite,
    "metrics": metric_suite,
    "data": data_suite,
    "formats": format_suite,
    "repro": reproducibility_suite,
    "misc": misc_suite,
}


def run_audit(names=None, stream=None) -> tuple[bool, list[Check]]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown audit suites: {unknown}; available: {list(SUITES)}")
    stream = stream if stream is not None else io.StringIO()
    checks = []
    for n in names:
        t0 = time.perf_counter()
        res = SUITES[n]()
        for c in res:
            print(c.line(), file=stream, flush=True)
        print(f"-- {n}: {sum(c.passed for c in res)}/{len(res)} passed in "
              f"{time.perf_counter() - t0:.1f}s", file=stream, flush=True)
        checks.extend(res)
    return all(c.passed for c in checks), checks
