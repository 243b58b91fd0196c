"""AdamW trainer, experiment profiles, ablation sweeps and the benchmark."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DEFAULT_MANIFEST, build_dataset, collate, load_manifest
from .losses import composite_loss
from .metrics import MetricsReport, evaluate, psnr
from .model import PifNet, PifNetConfig, load_checkpoint, save_checkpoint
from .nn import bicubic_upsample
from .tensor import Parameter

log = logging.getLogger(__name__)

HALVE_EVERY = 200


class DivergenceError(RuntimeError):
    """Training loss went non-finite; the last good checkpoint is kept."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def lr_schedule(base: float, epoch: int, halve_every: int = HALVE_EVERY) -> float:
    return base * 0.5 ** (epoch // halve_every)


@dataclass
class TrainState:
    params: list[Parameter]
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    step: int = 0
    epoch: int = 0
    seed: int = 0
    skipped: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return lr_schedule(self.base_lr, self.epoch)

    def effective_lr(self) -> float:
        """Scheduled rate times the linear warmup factor for the next step."""
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (self.step + 1) / self.warmup_steps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    live = [p for p in params if not p.frozen and p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in live))
    if max_norm > 0 and norm > max_norm and math.isfinite(norm):
        c = max_norm / (norm + 1e-12)
        for p in live:
            p.grad *= c
    return norm


def adamw_step(state: TrainState, grads=None) -> TrainState:
    """One decoupled-weight-decay Adam update; frozen parameters are skipped.

    ``grads`` defaults to each parameter's accumulated ``.grad``.  A step
    with any non-finite gradient is skipped entirely and counted.
    """
    gs = [p.grad for p in state.params] if grads is None else list(grads)
    live = [i for i, p in enumerate(state.params) if not p.frozen and gs[i] is not None]
    if any(not np.all(np.isfinite(gs[i])) for i in live):
        state.skipped += 1
        log.warning("non-finite gradient; step skipped (%d so far)", state.skipped)
        return state
    lr = state.effective_lr()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for i in live:
        p, g = state.params[i], gs[i]
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= (lr * upd).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    model: PifNetConfig = field(default_factory=PifNetConfig)
    manifest: str | None = None        # JSON manifest path; None uses the built-in scene
    manifest_overrides: dict = field(default_factory=dict)
    epochs: int = 500
    max_steps: int | None = None       # stop after this many optimizer steps
    batch_size: int = 8
    lr: float = 1e-4
    warmup_steps: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    eval_every: int = 50               # steps; 0 disables periodic eval
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        model = PifNetConfig.from_dict(d.pop("model", {}))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(model=model, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def manifest_dict(self) -> dict:
        m = load_manifest(self.manifest) if self.manifest else dict(DEFAULT_MANIFEST)
        m.update(self.manifest_overrides)
        return m


def desk_profile(**overrides) -> ExperimentConfig:
    """D=16, L=2 on the 128x128x16 synthetic scene, x4, 32 patches, 200 steps."""
    model = PifNetConfig(bands=16, msi_bands=4, scale=4, hidden=16, blocks=2, rank=2)
    cfg = ExperimentConfig(model=model, epochs=50, max_steps=200, batch_size=8, lr=2e-3,
                           warmup_steps=40, eval_every=50, out_dir="runs/desk")
    return _apply(cfg, overrides)


def paper_profile(**overrides) -> ExperimentConfig:
    """D=64, L=4 on a 103-band scene with 64x64 patches, 500 epochs at 1e-4."""
    model = PifNetConfig(bands=103, msi_bands=4, scale=4, hidden=64, blocks=4, rank=4)
    scene = {"seed": 7, "height": 256, "width": 256, "bands": 103, "complexity": 5}
    cfg = ExperimentConfig(model=model, manifest_overrides={
        "scene": scene, "patch": 64, "train_stride": 32, "test_stride": 64, "test_rows": 64,
        "max_train": None}, epochs=500, batch_size=8, lr=1e-4, out_dir="runs/paper")
    return _apply(cfg, overrides)


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _apply(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    model_keys = {f.name for f in dataclasses.fields(PifNetConfig)}
    mo = {k: v for k, v in overrides.items() if k in model_keys}
    eo = {k: v for k, v in overrides.items() if k not in model_keys}
    if mo:
        cfg = cfg.replace(model=cfg.model.replace(**mo))
    if "scale" in mo:
        cfg.manifest_overrides = {**cfg.manifest_overrides, "scale": mo["scale"]}
    return cfg.replace(**eo) if eo else cfg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    report: MetricsReport
    bicubic_psnr: float
    losses: list[dict]
    checkpoint: Path | None
    model: PifNet
    skipped: int = 0

    @property
    def first_loss(self) -> float:
        return self.losses[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]["total"]


def _predict(model: PifNet, x, y, batch: int = 8) -> np.ndarray:
    outs = []
    with T.no_grad():
        for k in range(0, len(x), batch):
            z_hat, _, _ = model(x[k:k + batch], y[k:k + batch])
            outs.append(z_hat.data)
    return np.concatenate(outs)


def mean_psnr(ref: np.ndarray, est: np.ndarray) -> float:
    return float(np.mean([psnr(r, e) for r, e in zip(ref, est)]))


def bicubic_baseline(x: np.ndarray, z: np.ndarray, scale: int) -> float:
    with T.no_grad():
        up = bicubic_upsample(x, scale).data
    return mean_psnr(z, up)


def _check_data(cfg: ExperimentConfig, train, test, srf):
    mc = cfg.model
    if not train or not test:
        raise ValueError("manifest produced an empty train or test split")
    C = train[0].z.shape[-1]
    if C != mc.bands:
        raise ValueError(f"dataset has {C} bands but the model expects {mc.bands}")
    if srf.msi_bands != mc.msi_bands:
        raise ValueError(f"dataset has {srf.msi_bands} MSI bands but the model expects {mc.msi_bands}")
    if train[0].scale != mc.scale:
        raise ValueError(f"dataset scale {train[0].scale} != model scale {mc.scale}")


def train(cfg: ExperimentConfig, write: bool = True, quiet: bool = False) -> TrainResult:
    """Run one experiment; writes loss CSV, checkpoint and metrics JSON to ``out_dir``."""
    model_cfg = cfg.model.replace(seed=cfg.seed)
    train_set, test_set, srf = build_dataset(cfg.manifest_dict())
    _check_data(cfg, train_set, test_set, srf)
    model = PifNet(model_cfg)
    params = model.parameters()
    state = TrainState(params, base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                       warmup_steps=cfg.warmup_steps, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    xt, yt, zt = collate(test_set)
    base_psnr = bicubic_baseline(xt, zt, model_cfg.scale)
    n_coupled = None
    out = Path(cfg.out_dir)
    ckpt = out / "model.pifn"
    if write:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    losses: list[dict] = []
    t0 = time.perf_counter()
    done = False
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        order = rng.permutation(len(train_set))
        for k in range(0, len(order), cfg.batch_size):
            x, y, z = collate([train_set[i] for i in order[k:k + cfg.batch_size]])
            if n_coupled is None:
                n_coupled = model.coupled_elements(x.shape)
            z_hat, z_bar, logdet = model(x, y)
            lb = composite_loss(z_hat, z, z_bar, logdet, model_cfg.lambda_inv, model_cfg.lambda_cos,
                                n_coupled, model_cfg.signed_logdet, model_cfg.cos_per_pixel)
            row = {"step": state.step + 1, "epoch": epoch, "lr": state.effective_lr(),
                   **lb.as_floats()}
            if not math.isfinite(row["total"]):
                raise DivergenceError(f"loss became {row['total']} at step {row['step']}; "
                                      f"last good checkpoint: {ckpt if write and ckpt.exists() else 'none'}")
            T.backward(lb.total)
            row["grad_norm"] = clip_grad_norm(params, cfg.clip_norm)
            adamw_step(state)
            model.zero_grad()
            losses.append(row)
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                p = mean_psnr(zt, _predict(model, xt, yt))
                row["test_psnr"] = p
                if not quiet:
                    log.info("step %d  loss %.5f  test psnr %.3f dB (bicubic %.3f)  %.1fs",
                             state.step, row["total"], p, base_psnr, time.perf_counter() - t0)
                if write:
                    save_checkpoint(model, ckpt)
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    elapsed = time.perf_counter() - t0
    pred = _predict(model, xt, yt)
    t1 = time.perf_counter()
    _predict(model, xt[:1], yt[:1])
    ms = (time.perf_counter() - t1) * 1000.0
    report = evaluate(zt, pred, model_cfg.scale, params=model.num_parameters(), ms_per_image=ms)
    if write:
        save_checkpoint(model, ckpt)
        write_loss_csv(out / "loss.csv", losses)
        summary = {**report.to_dict(), "bicubic_psnr": base_psnr, "steps": state.step,
                   "skipped_steps": state.skipped, "train_seconds": elapsed,
                   "first_loss": losses[0]["total"], "final_loss": losses[-1]["total"]}
        (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return TrainResult(report, base_psnr, losses, ckpt if write else None, model, state.skipped)


LOSS_COLUMNS = ["step", "epoch", "lr", "l1", "l_inv", "l_cos", "total", "grad_norm", "test_psnr"]


def write_loss_csv(path, losses: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in losses:
            w.writerow(row)


def evaluate_checkpoint(path, cfg: ExperimentConfig) -> tuple[MetricsReport, float]:
    model = load_checkpoint(path)
    _, test_set, _ = build_dataset(cfg.manifest_dict())
    xt, yt, zt = collate(test_set)
    pred = _predict(model, xt, yt)
    return (evaluate(zt, pred, model.cfg.scale, params=model.num_parameters()),
            bicubic_baseline(xt, zt, model.cfg.scale))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

BETA_SWEEP = (0.0, 0.4, 0.8, 1.0)
BLOCK_SWEEP = {
    "full": {},
    "no_mamba": {"use_mamba": False},
    "no_famlora": {"use_famlora": False},
    "unfrozen_attention": {"freeze_second_pass": False},
}
LOSS_SWEEP = {
    "L1": {"lambda_inv": 0.0, "lambda_cos": 0.0},
    "L1+Linv": {"lambda_cos": 0.0},
    "L1+Lcos": {"lambda_inv": 0.0},
    "all": {},
}


def run_sweep(base: ExperimentConfig, variants: dict[str, dict], seeds=(0,)) -> list[dict]:
    """Train every (variant, seed) pair; one row per variant with seed-averaged metrics."""
    rows = []
    for name, changes in variants.items():
        per_seed = []
        for seed in seeds:
            cfg = base.replace(model=base.model.replace(**changes), seed=seed,
                               out_dir=str(Path(base.out_dir) / name / f"seed{seed}"))
            res = train(cfg, write=False, quiet=True)
            per_seed.append(res)
            log.info("%s seed %d: psnr %.3f", name, seed, res.report.psnr)
        rows.append({
            "variant": name,
            "psnr": float(np.mean([r.report.psnr for r in per_seed])),
            "ssim": float(np.mean([r.report.ssim for r in per_seed])),
            "sam": float(np.mean([r.report.sam for r in per_seed])),
            "ergas": float(np.mean([r.report.ergas for r in per_seed])),
            "bicubic_psnr": float(np.mean([r.bicubic_psnr for r in per_seed])),
            "psnr_per_seed": [r.report.psnr for r in per_seed],
        })
    return rows


def beta_variants(betas=BETA_SWEEP) -> dict[str, dict]:
    return {f"beta={b:g}": {"beta": float(b)} for b in betas}


def format_table(rows: list[dict], title: str = "") -> str:
    cols = ["variant", "psnr", "ssim", "sam", "ergas"]
    lines = [title] if title else []
    lines.append(" | ".join(f"{c:>18}" if i == 0 else f"{c:>9}" for i, c in enumerate(cols)))
    for r in rows:
        lines.append(" | ".join(f"{r['variant']:>18}" if i == 0 else f"{r[c]:9.4f}"
                                for i, c in enumerate(cols)))
    return "\n".join(lines)


def ablate(base: ExperimentConfig, which: str = "all", seeds=(0,)) -> dict[str, list[dict]]:
    sweeps = {"beta": beta_variants(), "blocks": BLOCK_SWEEP, "loss": LOSS_SWEEP}
    if which != "all":
        if which not in sweeps:
            raise ValueError(f"unknown sweep {which!r}; choose from {sorted(sweeps)} or 'all'")
        sweeps = {which: sweeps[which]}
    return {k: run_sweep(base, v, seeds) for k, v in sweeps.items()}


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def bench(cfg: ExperimentConfig, repeats: int = 3, patch: int | None = None) -> dict:
    """Parameter count and per-image inference wall-clock on random inputs."""
    mc = cfg.model
    model = PifNet(mc)
    p = patch or cfg.manifest_dict()["patch"]
    rng = np.random.default_rng(cfg.seed)
    dt = mc.np_dtype
    x = rng.random((1, p // mc.scale, p // mc.scale, mc.bands)).astype(dt)
    y = rng.random((1, p, p, mc.msi_bands)).astype(dt)
    times = []
    with T.no_grad():
        model(x, y)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(x, y)
            times.append(time.perf_counter() - t0)
    return {"params": model.num_parameters(), "ms_per_image": 1000.0 * float(np.median(times)),
            "patch": p, "bands": mc.bands, "hidden": mc.hidden, "blocks": mc.blocks}
