"""Desk-scale ablation on the two-district scene.

One global run, then the focal stage under each setting on a copy of it:
30% error-weighted sampling (default), 0% and 100% weighted, and focal
encoders trained from scratch without the global features.  Prints a table of
mean test PSNR/SSIM and the cross-block discrepancy on the boundary views.

    python scripts/ablation.py [--config scripts/desk.yaml] [--out ablation.json]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from focalfield.dataset import render_dataset
from focalfield.scene import make_two_district_scene, two_district_cameras
from focalfield.trainer import (
    TrainConfig,
    clone_global,
    cross_block_consistency,
    evaluate,
    partition_cameras,
    train_focal,
    train_global,
)

HERE = Path(__file__).resolve().parent
VARIANTS = {
    "30% weighted": {},
    "0% weighted": {"weighted_fraction": 0.0},
    "100% weighted": {"weighted_fraction": 1.0},
    "scratch (no global features)": {"focal_mode": "scratch"},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=HERE / "desk.yaml")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablation.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = TrainConfig.from_file(args.config, seed=args.seed, log_every=1000)
    cams, boundary = two_district_cameras()
    data = render_dataset(make_two_district_scene(seed=args.seed), cams, boundary_ids=boundary)

    t0 = time.perf_counter()
    g = train_global(data, cfg)
    rep, _ = evaluate(g, None, None, data, cfg=cfg)
    rows = [{"setting": "global stage only", "psnr": rep.mean_psnr, "ssim": rep.mean_ssim,
             "seconds": time.perf_counter() - t0}]
    for name, change in VARIANTS.items():
        t0 = time.perf_counter()
        c = cfg.replace(**change)
        gc = clone_global(g)
        asg = partition_cameras(data, c)
        enc = {b: train_focal(gc, data, asg, b, c).encoder for b in range(asg.k)}
        rep, _ = evaluate(gc, enc, asg, data, cfg=c)
        cons = cross_block_consistency(gc, enc, data, data.boundary_ids, c)
        rows.append({"setting": name, "psnr": rep.mean_psnr, "ssim": rep.mean_ssim, **cons,
                     "seconds": time.perf_counter() - t0})

    print(f"{'setting':32s} {'PSNR':>7s} {'SSIM':>7s} {'depth L1':>9s} {'x-block PSNR':>13s}")
    for r in rows:
        extra = f"{r['depth_l1']:9.4f} {r['color_psnr']:13.2f}" if "depth_l1" in r else ""
        print(f"{r['setting']:32s} {r['psnr']:7.2f} {r['ssim']:7.4f} {extra}")
    Path(args.out).write_text(json.dumps({"config": cfg.to_dict(), "rows": rows}, indent=1))


if __name__ == "__main__":
    main()
