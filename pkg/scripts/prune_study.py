"""Octree pruning study on the single-cluster blob scene.

For each prune threshold, trains the global stage and reports the fraction of
leaves outside the blob supports that got pruned, the fraction of leaves
touching a support that got pruned, mean samples per ray over a fixed ray set,
and train-view PSNR.  Threshold 0 is the no-prune reference.

    python scripts/prune_study.py --thresholds 0 0.01 0.1 0.3 1.0
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from focalfield.dataset import render_dataset
from focalfield.geometry import rays_for_pixels
from focalfield.scene import make_blob_scene, orbit_cameras
from focalfield.trainer import TrainConfig, evaluate, train_global

HERE = Path(__file__).resolve().parent


def support_mask(tree, leaves, scene):
    """True for leaves whose box meets some blob's truncation ball (radius 2r)."""
    c = np.array([b.center for b in scene.blobs])
    r = np.array([b.radius for b in scene.blobs])
    gap = np.maximum(tree.node_min[leaves][:, None] - c, 0) + np.maximum(c - tree.node_max[leaves][:, None], 0)
    return np.any(np.sum(gap**2, axis=-1) <= (2 * r) ** 2, axis=1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=HERE / "desk.yaml")
    ap.add_argument("--thresholds", type=float, nargs="+", default=[0.0, 0.01, 0.1, 0.3, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="prune_study.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = TrainConfig.from_file(args.config, seed=args.seed, log_every=0)
    data = render_dataset(make_blob_scene(seed=args.seed), orbit_cameras((0, 0, 0), 2.5, 20, 64, 64))
    ids = np.repeat(data.train_ids, 256)
    rng = np.random.default_rng(0)
    rays = rays_for_pixels(data.cameras, ids, rng.integers(0, 64, len(ids)), rng.integers(0, 64, len(ids)),
                           data.bounds)

    rows = []
    for tau in args.thresholds:
        g = train_global(data, cfg.replace(prune_threshold=tau))
        tree = g.octree
        leaves = tree.leaves()
        occ = support_mask(tree, leaves, data.scene)
        dead = np.isin(leaves, tree.dead_leaves())
        spr = len(tree.sample_rays(*rays, cfg.step_scale, cfg.max_points_per_ray)) / len(ids)
        rep, _ = evaluate(g, None, None, data, image_ids=data.train_ids, cfg=cfg)
        rows.append({"threshold": tau, "leaves": len(leaves), "empty_pruned": float(dead[~occ].mean()),
                     "support_pruned": float(dead[occ].mean()), "samples_per_ray": spr, "train_psnr": rep.mean_psnr})
        r = rows[-1]
        print(f"threshold {tau:6.3f}  leaves {r['leaves']:4d}  empty pruned {r['empty_pruned']:.2f}  "
              f"support pruned {r['support_pruned']:.2f}  samples/ray {spr:6.2f}  train PSNR {rep.mean_psnr:.2f}")
    Path(args.out).write_text(json.dumps({"config": cfg.to_dict(), "rows": rows}, indent=1))


if __name__ == "__main__":
    main()
