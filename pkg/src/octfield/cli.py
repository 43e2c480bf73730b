"""Command-line entry points: synth, train, render, eval and tree-dump.

Failures print a single ``error: <kind>: <message>`` line on stderr and
exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

CHECKPOINT_NAME = "checkpoint.json"
METRICS_NAME = "metrics.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolution(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional_float(text: str):
    return None if text.lower() in ("none", "null") else float(text)


def _config_flags(parser):
    """One ``--<field>`` override per scalar TrainConfig field."""
    from .trainer import TrainConfig

    types = {"int": int, "float": float, "str": str, "bool": _bool, "Optional[float]": _optional_float}
    for f in dataclasses.fields(TrainConfig):
        kind = types.get(str(f.type))
        if kind is None:
            continue
        extra = {"choices": ["surface", "tomography"]} if f.name == "weight_model" else {}
        parser.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=kind, default=None,
                            **extra)
    parser.add_argument("--width", dest="arch_width", type=int, default=None, help="per-leaf trunk width")
    parser.add_argument("--depth", dest="arch_depth", type=int, default=None, help="per-leaf trunk depth")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="octfield", description="Adaptive octree neural volume rendering at desk scale.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (never above the available cores)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render an analytic scene into a dataset folder")
    s.add_argument("--scene", default="sphere", choices=["sphere", "fruitbowl", "terrain"])
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--test-views", type=int, default=4)
    s.add_argument("--layout", default="orbit", choices=["orbit", "grid", "sparse-uav"])
    s.add_argument("--res", type=_resolution, default=(64, 64))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=512, help="oracle marching steps per ray")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an octree model on a dataset folder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="JSON file mirroring TrainConfig")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--no-wall-time", action="store_true", help="write wall_ms as 0 for diffable metrics")
    _config_flags(t)

    r = sub.add_parser("render", help="render one view of a checkpoint")
    r.add_argument("--ckpt", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--camera-index", type=int)
    src.add_argument("--pose", help="camera JSON file (object or list; the first entry is used)")
    r.add_argument("--data", default=None, help="dataset for --camera-index (default: the training data)")
    r.add_argument("--split", default="test", choices=["train", "test"])
    r.add_argument("--out", required=True, help="PPM image path")
    r.add_argument("--depth", default=None, help="16-bit PGM depth path")

    e = sub.add_parser("eval", help="PSNR and SSIM on held-out views")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--out", required=True)

    d = sub.add_parser("tree-dump", help="write the octree structure as JSON")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out", required=True)
    return p


# -- commands ----------------------------------------------------------------------


def _cmd_synth(args):
    from . import synth

    ds = synth.make_dataset(synth.make_scene(args.scene), args.views, args.layout, args.res, args.seed,
                            args.out, n_test=args.test_views, steps=args.steps)
    print(f"wrote {len(ds.cameras)} training and {len(ds.test_cameras)} held-out views to {args.out}")


def _train_config(args):
    from .network import ArchConfig
    from .trainer import TrainConfig

    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    cfg = TrainConfig.from_json(base)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    arch = cfg.arch
    if args.arch_width is not None or args.arch_depth is not None:
        arch = dataclasses.replace(arch, width=args.arch_width or arch.width, depth=args.arch_depth or arch.depth)
        if not isinstance(arch, ArchConfig):
            raise TypeError("arch override failed")
    return dataclasses.replace(cfg, arch=arch, **overrides)


def _cmd_train(args):
    from . import synth, trainer

    ds = synth.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    cfg = _train_config(args)
    state = trainer.load_checkpoint(ckpt) if args.resume else None
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1))
    meta = {"data": str(Path(args.data).resolve())}
    try:
        state = trainer.train(ds, cfg, state, metrics_path=out / METRICS_NAME,
                              record_wall_time=not args.no_wall_time)
    except trainer.TrainingDivergedError as err:
        if err.checkpoint is not None:
            Path(out / "last_good.json").write_text(json.dumps(err.checkpoint))
        raise
    trainer.save_checkpoint(ckpt, state, meta=meta)
    (out / "tree_log.json").write_text(json.dumps(state.tree_log, indent=1))
    print(f"trained {state.epoch} epochs, {len(state.model.active_leaves())} active leaves -> {ckpt}")


def _pose_camera(path):
    from .geometry import Camera

    d = json.loads(Path(path).read_text())
    if isinstance(d, dict) and "cameras" in d:
        d = d["cameras"]
    if isinstance(d, list):
        if not d:
            raise ValueError(f"no cameras in {path}")
        d = d[0]
    return Camera.from_json(d)


def _dataset_for(args, meta: dict):
    from . import synth

    root = args.data or meta.get("data")
    if root is None:
        raise ValueError("--camera-index needs --data (checkpoint records no dataset)")
    return synth.load_dataset(root)


def _cmd_render(args):
    from . import trainer
    from .images import write_pgm16, write_ppm

    state, meta = trainer.load_checkpoint(args.ckpt, with_meta=True)
    background = None
    if args.pose:
        cam = _pose_camera(args.pose)
    else:
        ds = _dataset_for(args, meta)
        cams = ds.test_cameras if args.split == "test" else ds.cameras
        if not 0 <= args.camera_index < len(cams):
            raise IndexError(f"camera index {args.camera_index} outside 0..{len(cams) - 1}")
        cam = cams[args.camera_index]
        background = trainer._background(ds, state.config)
    image, depth = trainer.render_view(state.model, cam, state.config, background)
    write_ppm(args.out, image)
    if args.depth:
        write_pgm16(args.depth, depth)
    print(f"wrote {args.out}")


def _cmd_eval(args):
    from . import synth, trainer

    state = trainer.load_checkpoint(args.ckpt)
    ds = synth.load_dataset(args.data)
    cams, imgs = (ds.test_cameras, ds.test_images) if args.split == "test" else (ds.cameras, ds.images)
    if not cams:
        raise ValueError(f"dataset {args.data} has no {args.split} views")
    background = trainer._background(ds, state.config)
    rows = []
    for k, (cam, ref) in enumerate(zip(cams, imgs)):
        image, _ = trainer.render_view(state.model, cam, state.config, background)
        rows.append((k, *trainer.evaluate(image, ref)))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view", "psnr_db", "ssim"])
        for k, p, s in rows:
            w.writerow([k, f"{p:.4f}", f"{s:.6f}"])
        w.writerow(["mean", f"{np.mean([r[1] for r in rows]):.4f}", f"{np.mean([r[2] for r in rows]):.6f}"])
    print(f"psnr {np.mean([r[1] for r in rows]):.2f} dB, ssim {np.mean([r[2] for r in rows]):.4f}")


def _cmd_tree_dump(args):
    from . import trainer

    state = trainer.load_checkpoint(args.ckpt)
    m = state.model
    doc = {
        "root_bounds": m.root_bounds.to_json(),
        "max_level": m.max_level,
        "epoch": state.epoch,
        "active_leaves": len(m.active_leaves()),
        "inactive_leaves": len(m.inactive_leaves()),
        "nodes": m.dump(),
    }
    Path(args.out).write_text(json.dumps(doc, indent=1))
    print(f"wrote {args.out}")


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "tree-dump": _cmd_tree_dump,
}


def _limit_threads(n: Optional[int]):
    if n is None:
        return None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    # OpenBLAS can crash when raised above the cores it initialized for
    return threadpool_limits(limits=min(n, _available_cores()))


def _available_cores() -> int:
    if hasattr(os, "sched_getaffinity"):
        return len(os.sched_getaffinity(0))
    return os.cpu_count() or 1


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        limiter = _limit_threads(args.threads)
        try:
            COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as err:
        print(f"error: usage: {_one_line(err)}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - every failure becomes one line
        print(f"error: {type(err).__name__}: {_one_line(err)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
