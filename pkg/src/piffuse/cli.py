"""``piffuse`` command line: synth, train, eval, fuse, audit, ablate, bench.

Exit codes: 0 success, 1 bad input or usage, 2 audit failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path


from . import tensor as T
from .data import build_dataset, read_cube, synth_scene, write_cube
from .metrics import CSV_COLUMNS, evaluate, sam
from .model import CheckpointError, load_checkpoint
from .tensor import ShapeError
from .train import (PROFILES, DivergenceError, ExperimentConfig, ablate, bench, evaluate_checkpoint,
                    format_table, train)

log = logging.getLogger("piffuse")

EXIT_OK, EXIT_INVALID, EXIT_AUDIT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="experiment config JSON (overrides --profile)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=int, choices=(2, 4, 8))
    p.add_argument("--beta", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = _Parser(prog="piffuse", description="Prior-guided hyperspectral/multispectral fusion.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic scene and its inputs as HSC1 cubes")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on the held-out patches")
    p.add_argument("checkpoint")

    p = sub.add_parser("fuse", parents=[common], help="fuse an LR-HSI and an HR-MSI cube")
    p.add_argument("checkpoint")
    p.add_argument("lrhsi", help="HSC1 cube [h, w, C]")
    p.add_argument("hrmsi", help="HSC1 cube [s*h, s*w, c]")
    p.add_argument("--ref", help="ground-truth cube; the SAM map is taken against it if given")

    p = sub.add_parser("audit", parents=[common], help="run the self-check suites")
    p.add_argument("--suite", action="append", help="limit to the named suite (repeatable)")

    p = sub.add_parser("ablate", parents=[common], help="beta / block / loss-term sweeps")
    p.add_argument("--sweep", choices=("beta", "blocks", "loss", "all"), default="all")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds averaged per row")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("bench", parents=[common], help="parameter count and inference time")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--patch", type=int)
    return ap


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = ExperimentConfig.load(path)
        except (ValueError, TypeError, json.JSONDecodeError) as e:
            raise UsageError(f"bad config {path}: {e}") from e
    else:
        cfg = PROFILES[args.profile]()
    model_changes = {}
    if args.scale is not None:
        model_changes["scale"] = args.scale
        cfg.manifest_overrides = {**cfg.manifest_overrides, "scale": args.scale}
    if args.beta is not None:
        model_changes["beta"] = args.beta
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = cfg.replace(seed=args.seed)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(max_steps=args.steps)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.replace(epochs=args.epochs)
    if getattr(args, "lr", None) is not None:
        cfg = cfg.replace(lr=args.lr)
    try:
        if model_changes:
            cfg = cfg.replace(model=cfg.model.replace(**model_changes))
        if not 0.0 <= cfg.model.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {cfg.model.beta}")
    except ValueError as e:
        raise UsageError(str(e)) from e
    return cfg


def _out_dir(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "synth")
    manifest = cfg.manifest_dict()
    train_set, test_set, srf = build_dataset(manifest)
    sc = manifest["scene"]
    scene = synth_scene(sc["seed"], sc["height"], sc["width"], sc["bands"], sc.get("complexity", 3))
    write_cube(out / "scene.hsc", scene.data)
    ex = test_set[0]
    write_cube(out / "test0_z.hsc", ex.z)
    write_cube(out / "test0_x.hsc", ex.x)
    write_cube(out / "test0_y.hsc", ex.y)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "srf.json").write_text(json.dumps(srf.srf.tolist()))
    print(json.dumps({"scene": list(scene.data.shape), "train_patches": len(train_set),
                      "test_patches": len(test_set), "out": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    res = train(cfg)
    summary = {**res.report.to_dict(), "bicubic_psnr": res.bicubic_psnr,
               "first_loss": res.first_loss, "final_loss": res.final_loss,
               "steps": len(res.losses), "out": cfg.out_dir}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    report, base = evaluate_checkpoint(args.checkpoint, cfg)
    d = {**report.to_dict(), "bicubic_psnr": base}
    print(json.dumps(d, sort_keys=True))
    if args.out:
        out = _out_dir(args, "")
        (out / "metrics.json").write_text(json.dumps(d, indent=2, sort_keys=True))
        (out / "metrics.csv").write_text(report.csv_row(header=True))
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = load_checkpoint(args.checkpoint)
    x, y = read_cube(args.lrhsi), read_cube(args.hrmsi)
    dt = model.cfg.np_dtype
    with T.no_grad():
        z_hat, z_bar, _ = model(x.astype(dt)[None], y.astype(dt)[None])
    z_hat, z_bar = z_hat.data[0], z_bar.data[0]
    out = _out_dir(args, "fused")
    write_cube(out / "fused.hsc", z_hat)
    if args.ref:
        ref = read_cube(args.ref)
        if ref.shape != z_hat.shape:
            raise UsageError(f"reference shape {ref.shape} != fused shape {z_hat.shape}")
        sam_mean, sam_map = sam(ref, z_hat)
        report = evaluate(ref, z_hat, model.cfg.scale, params=model.num_parameters())
        (out / "metrics.json").write_text(report.to_json())
    else:
        sam_mean, sam_map = sam(z_bar, z_hat)
    write_cube(out / "sam_map.hsc", sam_map[..., None].astype(z_hat.dtype))
    print(json.dumps({"fused": list(z_hat.shape), "sam_mean": sam_mean, "out": str(out)}))
    return EXIT_OK


def cmd_audit(args) -> int:
    from .audit import run_audit
    try:
        ok, checks = run_audit(args.suite, stream=sys.stdout)
    except ValueError as e:
        raise UsageError(str(e)) from e
    n_ok = sum(c.passed for c in checks)
    print(f"audit: {n_ok}/{len(checks)} checks passed")
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = tuple(range(cfg.seed, cfg.seed + args.seeds))
    tables = ablate(cfg, args.sweep, seeds)
    out = _out_dir(args, "ablation")
    for name, rows in tables.items():
        print(format_table(rows, f"== {name} sweep ({len(seeds)} seed(s)) =="))
        with open(out / f"{name}.csv", "w") as fh:
            fh.write("variant," + ",".join(CSV_COLUMNS[2:6]) + ",bicubic_psnr\n")
            for r in rows:
                fh.write(f"{r['variant']},{r['psnr']},{r['ssim']},{r['sam']},{r['ergas']},{r['bicubic_psnr']}\n")
    (out / "ablation.json").write_text(json.dumps(tables, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    res = bench(cfg, repeats=args.repeats, patch=args.patch)
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "fuse": cmd_fuse,
            "audit": cmd_audit, "ablate": cmd_ablate, "bench": cmd_bench}


def _thread_limit():
    n = os.environ.get("PIFFUSE_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        k = int(n)
        if k < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"PIFFUSE_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (UsageError, ShapeError, CheckpointError, ValueError, FileNotFoundError) as e:
        print(f"piffuse {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except DivergenceError as e:
        print(f"piffuse {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_INVALID


def cli_main(argv=None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
