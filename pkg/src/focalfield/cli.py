"""Command line entry point: ``focalfield <command> ...``.

Commands
  gen-scene     render a synthetic two-district blob dataset
  train-global  global stage; writes octree/encoder/decoder/blocks/config
  train-focal   focal stage for one block (--block) or all (--all)
  render        render one camera with its nearest block (or --global-only)
  eval          score the test views, write metrics.json
  error-maps    dump per-image error heatmaps for a block
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

if "--deterministic" in sys.argv:
    # single-threaded BLAS keeps float reductions in a fixed order
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = "1"

import numpy as np  # noqa: E402

from .dataset import Dataset, render_dataset  # noqa: E402
from .image_io import save_image_pair, write_float_image, write_png  # noqa: E402
from .partition import BlockAssignment, nearest_block  # noqa: E402
from .renderer import render_image  # noqa: E402
from .scene import make_two_district_scene, two_district_cameras  # noqa: E402
from .trainer import (  # noqa: E402
    TrainConfig,
    _error_maps,
    block_field,
    evaluate,
    focal_path,
    load_config,
    load_focal_encoders,
    load_global,
    partition_cameras,
    save_global,
    train_focal,
    train_global,
    write_metrics,
)

log = logging.getLogger("focalfield")


def _config(args, run_dir=None) -> TrainConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    if getattr(args, "config", None):
        return TrainConfig.from_file(args.config, **overrides)
    if run_dir is not None and os.path.exists(os.path.join(run_dir, "config.json")):
        return load_config(run_dir).replace(**overrides)
    return TrainConfig(**overrides)


def cmd_gen_scene(args) -> None:
    seed = 0 if args.seed is None else args.seed
    scene = make_two_district_scene(args.blobs_per_district, seed=seed)
    cams, boundary = two_district_cameras(args.train_cameras, args.test_per_district, args.boundary_cameras,
                                          args.size, args.size)
    ds = render_dataset(scene, cams, args.steps_per_ray, boundary)
    ds.save(args.out)
    log.info("wrote %d views (%d train) to %s", len(ds), len(ds.train_ids), args.out)


def cmd_train_global(args) -> None:
    ds = Dataset.load(args.data)
    cfg = _config(args)
    t0 = time.perf_counter()
    ckpt = train_global(ds, cfg)
    assignment = partition_cameras(ds, cfg)
    save_global(args.run, ckpt, cfg, assignment)
    live = len(ckpt.octree.live_leaves())
    log.info("global stage done in %.1fs: %d live leaves, blocks %s", time.perf_counter() - t0, live,
             assignment.sizes().tolist())


def cmd_train_focal(args) -> None:
    ds = Dataset.load(args.data)
    cfg = _config(args, args.run)
    assignment = BlockAssignment.load(os.path.join(args.run, "blocks.json"))
    blocks = range(assignment.k) if args.all else [args.block]
    for b in blocks:
        g = load_global(args.run)  # fresh copy per block: blocks share nothing but files
        fc = train_focal(g, ds, assignment, b, cfg)
        fc.encoder.save(focal_path(args.run, b))
        log.info("block %d: final loss %.5f", b, fc.history[-1]["loss"] if fc.history else float("nan"))


def _render_field(args, ds, cfg, camera_id):
    g = load_global(args.run)
    if args.global_only:
        return block_field(g, None, ds.background), None
    assignment = BlockAssignment.load(os.path.join(args.run, "blocks.json"))
    b = nearest_block(assignment, ds.cameras[camera_id].position)
    focal = load_focal_encoders(args.run, assignment.k, required=False)
    if b not in focal:
        raise SystemExit(f"no focal checkpoint for block {b}; run train-focal --block {b}")
    return block_field(g, focal[b], ds.background, cfg.focal_mode == "scratch"), b


def cmd_render(args) -> None:
    ds = Dataset.load(args.data)
    cfg = _config(args, args.run)
    if not 0 <= args.camera < len(ds):
        raise SystemExit(f"camera {args.camera} out of range (0..{len(ds) - 1})")
    field, block = _render_field(args, ds, cfg, args.camera)
    rgb, depth = render_image(field, ds.cameras[args.camera], 1, cfg.step_scale, cfg.max_points_per_ray)
    stem = args.out or os.path.join(args.run, f"render_{args.camera:03d}")
    save_image_pair(stem, np.clip(rgb, 0, 1))
    save_image_pair(stem + "_depth", depth)
    log.info("camera %d rendered (block %s) -> %s.png", args.camera, block, stem)


def cmd_eval(args) -> None:
    ds = Dataset.load(args.data)
    cfg = _config(args, args.run)
    t0 = time.perf_counter()
    g = load_global(args.run)
    if args.global_only:
        report, renders = evaluate(g, None, None, ds, cfg=cfg, keep_renders=args.dump)
        label = "global"
    else:
        assignment = BlockAssignment.load(os.path.join(args.run, "blocks.json"))
        focal = load_focal_encoders(args.run, assignment.k)
        report, renders = evaluate(g, focal, assignment, ds, cfg=cfg, keep_renders=args.dump)
        label = "focal"
    for i, (rgb, depth) in renders.items():
        os.makedirs(os.path.join(args.run, "eval"), exist_ok=True)
        write_float_image(os.path.join(args.run, "eval", f"{i:03d}.f32"), rgb)
        save_image_pair(os.path.join(args.run, "eval", f"{i:03d}_depth"), depth)
    body = write_metrics(args.run, report, cfg, label, time.perf_counter() - t0)
    print(f"{label}: mean PSNR {body['mean_psnr']:.3f} dB, mean SSIM {body['mean_ssim']:.4f} over {body['count']} views")


def cmd_error_maps(args) -> None:
    ds = Dataset.load(args.data)
    cfg = _config(args, args.run)
    g = load_global(args.run)
    assignment = BlockAssignment.load(os.path.join(args.run, "blocks.json"))
    field = block_field(g, None, ds.background)
    if not args.global_only:
        focal = load_focal_encoders(args.run, assignment.k, required=False)
        if args.block in focal:
            field = block_field(g, focal[args.block], ds.background, cfg.focal_mode == "scratch")
    ids = assignment.members(args.block)
    errs = _error_maps(field, ds, ids, cfg.error_map_downsample, cfg)
    out = args.out or os.path.join(args.run, f"error_maps_{args.block}")
    os.makedirs(out, exist_ok=True)
    vmax = max(float(m.max()) for m in errs.full) or 1.0
    for i, full in zip(errs.image_ids, errs.full):
        write_float_image(os.path.join(out, f"{i:03d}.f32"), full)
        heat = np.clip(full / vmax, 0, 1)
        write_png(os.path.join(out, f"{i:03d}.png"), np.stack([heat, heat * 0.4, 1 - heat], axis=-1))
    log.info("wrote %d error maps to %s", len(ids), out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="flat key: value file mirroring TrainConfig")
    common.add_argument("--deterministic", action="store_true", help="fixed thread count, no timings in outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="focalfield", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common])
    s.add_argument("--out", required=True)
    s.add_argument("--blobs-per-district", type=int, default=12)
    s.add_argument("--train-cameras", type=int, default=40)
    s.add_argument("--test-per-district", type=int, default=3)
    s.add_argument("--boundary-cameras", type=int, default=3)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--steps-per-ray", type=int, default=512)
    s.set_defaults(fn=cmd_gen_scene)

    def run_parser(name, fn):
        r = sub.add_parser(name, parents=[common])
        r.add_argument("--data", required=True)
        r.add_argument("--run", required=True)
        r.set_defaults(fn=fn)
        return r

    run_parser("train-global", cmd_train_global)
    r = run_parser("train-focal", cmd_train_focal)
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--block", type=int)
    g.add_argument("--all", action="store_true")
    r = run_parser("render", cmd_render)
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--global-only", action="store_true")
    r.add_argument("--out", default=None, help="output path stem (default: <run>/render_<id>)")
    r = run_parser("eval", cmd_eval)
    r.add_argument("--global-only", action="store_true")
    r.add_argument("--dump", action="store_true", help="also write rendered test views under <run>/eval")
    r = run_parser("error-maps", cmd_error_maps)
    r.add_argument("--block", type=int, default=0)
    r.add_argument("--global-only", action="store_true", help="use the global model even if the block is trained")
    r.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.setLevel(logging.INFO)
    try:
        args.fn(args)
    except (FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
