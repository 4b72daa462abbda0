"""Posed image sets on disk: ``scene.json``, ``cameras.json``, ``images/NNN.{png,f32}``.

Ground-truth opacity, when known, sits next to each image as ``NNN_alpha.f32``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Camera, load_cameras, save_cameras
from .image_io import read_float_image, save_image_pair, write_float_image
from .scene import BlobScene, render_reference


@dataclass
class Dataset:
    cameras: list
    images: list
    bounds: tuple
    background: np.ndarray
    scene: Optional[BlobScene] = None
    boundary_ids: tuple = ()
    alphas: Optional[list] = None  # per-image opacity (H, W), if known

    def __len__(self):
        return len(self.cameras)

    @property
    def train_ids(self) -> list:
        return [i for i, c in enumerate(self.cameras) if c.split == "train"]

    @property
    def test_ids(self) -> list:
        return [i for i, c in enumerate(self.cameras) if c.split == "test"]

    def save(self, root) -> None:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        if self.scene is not None:
            self.scene.save(root / "scene.json")
        save_cameras(root / "cameras.json", self.cameras)
        meta = {
            "bounds": [list(map(float, self.bounds[0])), list(map(float, self.bounds[1]))],
            "background": list(map(float, self.background)),
            "boundary_ids": list(self.boundary_ids),
        }
        (root / "dataset.json").write_text(json.dumps(meta, indent=1))
        for i, img in enumerate(self.images):
            save_image_pair(root / "images" / f"{i:03d}", img)
        for i, a in enumerate(self.alphas or ()):
            write_float_image(root / "images" / f"{i:03d}_alpha.f32", a)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        cams = load_cameras(root / "cameras.json")
        meta = json.loads((root / "dataset.json").read_text())
        images = [read_float_image(root / "images" / f"{i:03d}.f32") for i in range(len(cams))]
        alpha_paths = [root / "images" / f"{i:03d}_alpha.f32" for i in range(len(cams))]
        alphas = None
        if all(p.exists() for p in alpha_paths):
            alphas = [read_float_image(p) for p in alpha_paths]
        scene = BlobScene.load(root / "scene.json") if (root / "scene.json").exists() else None
        bounds = tuple(np.asarray(b, dtype=np.float64) for b in meta["bounds"])
        return cls(cams, images, bounds, np.asarray(meta["background"]), scene,
                   tuple(meta.get("boundary_ids", ())), alphas)


def render_dataset(scene: BlobScene, cameras: list, steps_per_ray=512, boundary_ids=()) -> Dataset:
    images, alphas = [], []
    for cam in cameras:
        img, alpha = render_reference(scene, cam, steps_per_ray, return_opacity=True)
        images.append(img.astype(np.float32))
        alphas.append(alpha.astype(np.float32))
    return Dataset(cameras, images, scene.bounds, np.asarray(scene.background_color, dtype=np.float64),
                   scene, tuple(boundary_ids), alphas)
