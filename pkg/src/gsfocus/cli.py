"""Command line entry point: ``gsfocus <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data or validation error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import synth as synth_mod
from .config import TrainConfig, dump_config, load_config, scaled_schedule
from .core import RenderSettings
from .data import load_training_data, read_manifest, resolve_image_dir
from .errors import ContractError, GSFocusError, NumericalAbort
from .imageio import load_image, save_image
from .losses import psnr, ssim
from .optimizer import evaluate_views, initialize_cloud, summarize, train
from .partitioner import (assign_cameras, compute_bounds, export_bundles, filter_outliers,
                          load_partition_manifest, merge_blocks, subdivide)
from .ply import read_ply, write_ply
from .rasterizer import render
from .sfm import load_sfm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gsfocus")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(obj, path) -> None:
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _build_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    manifest = read_manifest(args.data) if getattr(args, "data", None) else None
    if manifest:
        for key, value in sorted(manifest.get("config_overrides", {}).items()):
            cfg.set(key, str(value))
    iterations = getattr(args, "iterations", None)
    if getattr(args, "scale_schedule", False):
        cfg = scaled_schedule(iterations if iterations is not None else cfg.iterations, cfg)
    elif iterations is not None:
        cfg.train.iterations = iterations
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        cfg.set(key.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "attn_interval", None) is not None:
        cfg.attention.interval = args.attn_interval
    if getattr(args, "no_attn_norm", False):
        cfg.attention.normalize = False
    if getattr(args, "no_attention", False):
        cfg.attention.enabled = False
    if getattr(args, "no_constraints", False):
        cfg.constraints.enabled = False
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = _build_config(args)
    data = load_training_data(args.data, args.images)
    cloud = initialize_cloud(data.points, data.point_colors, cfg)
    _ensure_parent(args.output)
    write_ply(cloud, args.output)
    print(f"initialized {len(cloud)} gaussians -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    data = load_training_data(args.data, args.images)
    start = read_ply(args.init) if args.init else None
    _ensure_parent(args.output)
    checkpoint = None
    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)

        def checkpoint(it, cloud):
            write_ply(cloud, os.path.join(args.checkpoint_dir, f"iter_{it:06d}.ply"))
    log_path = args.log or os.path.splitext(args.output)[0] + ".log.json"
    try:
        result = train(data, cfg, start, checkpoint)
    except NumericalAbort as exc:
        snap = os.path.splitext(args.output)[0] + ".abort.ply"
        if exc.snapshot is not None:
            write_ply(exc.snapshot, snap)
        print(f"error: {exc}; snapshot written to {snap}", file=sys.stderr)
        return EXIT_NUMERIC
    write_ply(result.cloud, args.output)
    payload = {"config": dump_config(cfg), "log": result.log, "events": result.events}
    if data.test_views:
        payload["test"] = summarize(evaluate_views(result.cloud, data.test_views, cfg.render))
    _write_json(payload, log_path)
    print(f"trained {cfg.iterations} iterations, {len(result.cloud)} gaussians -> {args.output}")
    return EXIT_OK


def _render_one(cloud, cam, settings, out_dir):
    image, _ = render(cloud, cam, settings)
    save_image(np.clip(image, 0.0, 1.0), os.path.join(out_dir, cam.name))
    return cam.name


def cmd_render(args) -> int:
    cloud = read_ply(args.ply)
    ds = load_sfm(args.data)
    ids = sorted(ds.images)
    cams = [ds.camera(i) for i in ids]
    os.makedirs(args.output, exist_ok=True)
    settings = RenderSettings()
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        names = list(pool.map(lambda c: _render_one(cloud, c, settings, args.output), cams))
    print(f"rendered {len(names)} views -> {args.output}")
    return EXIT_OK


def cmd_partition(args) -> int:
    ds = load_sfm(args.data)
    ids, xyz, _ = ds.point_array()
    box = compute_bounds(xyz, args.percentile, args.expand)
    part = filter_outliers(subdivide(xyz, box, args.blocks), args.theta)
    cams = [ds.camera(i) for i in sorted(ds.images)]
    assign_cameras(part, cams, ds.visibility(), args.min_views, args.camera_expand, point_ids=ids)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        TrainConfig().set(key.strip(), value)  # validate early
        overrides[key.strip()] = value
    image_dir = resolve_image_dir(args.data, args.images)
    written = export_bundles(part, ds, args.output, image_dir, ids, overrides)
    print(f"{len(written)} bundles ({len(part.untrainable)} untrainable, "
          f"{len(part.discarded)} points discarded) -> {args.output}")
    return EXIT_OK


_BLOCK_PLY = re.compile(r"block_(\d+)_(\d+)_(\d+)\.ply$")


def _find_block_clouds(directory) -> dict:
    clouds = {}
    for name in sorted(os.listdir(directory)):
        m = _BLOCK_PLY.match(name)
        path = os.path.join(directory, name)
        if m is None and os.path.isdir(path) and name.startswith("block_"):
            inner = os.path.join(path, "model.ply")
            m = re.match(r"block_(\d+)_(\d+)_(\d+)$", name)
            path = inner if (m and os.path.exists(inner)) else None
        if m and path:
            clouds[tuple(int(v) for v in m.groups())] = read_ply(path)
    return clouds


def cmd_merge(args) -> int:
    manifest = load_partition_manifest(args.partition)
    models = args.models or os.path.dirname(os.path.abspath(args.partition))
    clouds = _find_block_clouds(models)
    merged, report = merge_blocks(clouds, manifest, cull_boundary=not args.no_cull)
    _ensure_parent(args.output)
    write_ply(merged, args.output)
    if args.report:
        _write_json(report, args.report)
    print(f"merged {len(report['blocks'])} blocks, culled {report['culled']}, "
          f"{report['size']} gaussians -> {args.output}")
    return EXIT_OK


def _image_files(directory) -> list:
    return sorted(f for f in os.listdir(directory) if f.lower().endswith((".png", ".ppm")))


def cmd_eval(args) -> int:
    if args.ply:
        cloud = read_ply(args.ply)
        data = load_training_data(args.target, args.images)
        views = data.test_views if (args.split == "test" and data.test_views) else data.views
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_view = [m for chunk in pool.map(lambda v: evaluate_views(cloud, [v]), views)
                        for m in chunk]
    else:
        pred_dir, truth_dir = args.target, args.truth
        if truth_dir is None:
            raise UsageError("eval needs TRUTH_DIR (or --ply with a dataset)")
        names = _image_files(truth_dir)
        missing = [n for n in names if not os.path.exists(os.path.join(pred_dir, n))]
        if not names or missing:
            raise ContractError(f"renders missing for {missing or 'all views'}")

        def one(name):
            a = load_image(os.path.join(pred_dir, name))
            b = load_image(os.path.join(truth_dir, name))
            if a.shape != b.shape:
                raise ContractError(f"{name}: shape {a.shape} vs {b.shape}")
            return {"name": name, "psnr": psnr(a, b), "ssim": ssim(a, b)}
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_view = list(pool.map(one, names))
    result = {"views": per_view, "mean": summarize(per_view)}
    if args.output:
        _write_json(result, args.output)
    for m in per_view:
        print(f"{m['name']}: psnr={m['psnr']:.3f} ssim={m['ssim']:.4f}")
    print(f"mean: psnr={result['mean']['psnr']:.3f} ssim={result['mean']['ssim']:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    scene = synth_mod.SCENES[args.scene](seed=args.seed)
    synth_mod.write_scene(scene, args.output)
    print(f"{args.scene} scene: {len(scene.cameras)} train + {len(scene.test_cameras)} test views, "
          f"{len(scene.points)} points -> {args.output}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="INI file with [train], [loss], ... sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsfocus", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("init", help="build an initial cloud from SfM points")
    p.add_argument("data")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--images")
    _add_config_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="optimize a cloud against a dataset or bundle")
    p.add_argument("data")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--images")
    p.add_argument("--init", help="start from this PLY instead of the SfM points")
    p.add_argument("--iterations", type=int)
    p.add_argument("--scale-schedule", action="store_true",
                   help="compress the full-length schedule into --iterations")
    p.add_argument("--attn-interval", type=int)
    p.add_argument("--no-attn-norm", action="store_true")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-constraints", action="store_true")
    p.add_argument("--log", help="loss log JSON (default: <output>.log.json)")
    p.add_argument("--checkpoint-dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a PLY from every camera of a dataset")
    p.add_argument("ply")
    p.add_argument("data")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-j", "--jobs", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("partition", help="split a dataset into block bundles")
    p.add_argument("data")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--blocks", type=int, default=4, help="blocks per axis")
    p.add_argument("--theta", type=float, default=1.0,
                   help="outlier radius in block half-diagonals (inf disables)")
    p.add_argument("--min-views", type=int, default=20)
    p.add_argument("--camera-expand", type=float, default=1.2)
    p.add_argument("--percentile", type=float, default=1.0)
    p.add_argument("--expand", type=float, default=0.01)
    p.add_argument("--images")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="config override recorded in every bundle manifest")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("merge", help="merge trained block clouds")
    p.add_argument("partition", help="partition.json written by `partition`")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--models", help="directory holding block_i_j_k.ply files")
    p.add_argument("--no-cull", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="PSNR/SSIM of renders against ground truth")
    p.add_argument("target", help="render directory, or dataset with --ply")
    p.add_argument("truth", nargs="?")
    p.add_argument("--ply")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--images")
    p.add_argument("-o", "--output", help="metrics JSON")
    p.add_argument("-j", "--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    p.add_argument("output")
    p.add_argument("--scene", choices=sorted(synth_mod.SCENES), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("gsfocus: a subcommand is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GSFocusError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
