"""Pinhole cameras, rays and slab intersection.

Camera frame convention: +x right, +y down, +z forward (optical axis).
``rotation`` maps camera-frame vectors to world frame.  Pixel (px, py) is
sampled at its center, i.e. at (px + 0.5, py + 0.5) on the image plane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray
    position: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    split: str = "train"

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "position", pos)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if not np.all(np.isfinite(pos)):
            raise ValueError("camera position must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def downsampled(self, factor: int) -> "Camera":
        """Same pose with intrinsics scaled for a ``factor``-times smaller image."""
        if factor < 1 or self.width % factor or self.height % factor:
            raise ValueError(f"downsample factor {factor} must divide {self.width}x{self.height}")
        if factor == 1:
            return self
        return replace(
            self,
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> pixel indices (..., 2) under the +0.5 convention."""
        local = (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation
        u = self.fx * local[..., 0] / local[..., 2] + self.cx - 0.5
        v = self.fy * local[..., 1] / local[..., 2] + self.cy - 0.5
        return np.stack([u, v], axis=-1)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "position": self.position.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            position=np.asarray(d["position"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            split=d.get("split", "train"),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        # t_near == t_far marks a ray that misses the scene bounds
        if not (0 <= self.t_near <= self.t_far):
            raise ValueError(f"invalid ray interval [{self.t_near}, {self.t_far}]")

    @property
    def hits(self) -> bool:
        return self.t_near < self.t_far

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def make_camera(eye, target, width, height, fov_deg=45.0, split="train", up=(0.0, 0.0, 1.0)) -> Camera:
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return Camera(
        rotation=look_at(eye, target, up),
        position=np.asarray(eye, dtype=np.float64),
        fx=focal,
        fy=focal,
        cx=width / 2,
        cy=height / 2,
        width=width,
        height=height,
        split=split,
    )


def ray_aabb_intersect(ray: Ray, box_min, box_max) -> Optional[tuple[float, float]]:
    """Slab test restricted to t >= 0.  Returns ``None`` on a miss."""
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    if np.any(box_min >= box_max):
        raise ValueError("box_min must be < box_max componentwise")
    t0, t1 = slab_intersect(ray.origin[None], ray.direction[None], box_min, box_max)
    if not t0[0] <= t1[0]:
        return None
    return float(t0[0]), float(t1[0])


def slab_intersect(origins: np.ndarray, dirs: np.ndarray, box_min, box_max):
    """Vectorized slab test; rays that miss get ``t_enter > t_exit``."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (box_min - o) * inv
        tb = (box_max - o) * inv
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    parallel = d == 0
    inside = (o >= box_min) & (o <= box_max)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_enter = np.maximum(lo.max(axis=-1), 0.0)
    t_exit = hi.min(axis=-1)
    return t_enter, t_exit


def generate_ray(camera: Camera, px: float, py: float, bounds=None) -> Ray:
    """Single pinhole ray; clipped to ``bounds=(min, max)`` when given."""
    if not (math.isfinite(px) and math.isfinite(py)):
        raise ValueError("pixel coordinates must be finite")
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    o, d, tn, tf = generate_rays(camera, np.array([px]), np.array([py]), bounds)
    return Ray(o[0], d[0], float(tn[0]), float(tf[0]))


def generate_rays(camera: Camera, px, py, bounds=None):
    """Batched rays for one camera.  Returns (origins, dirs, t_near, t_far)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    local = np.stack(
        [(px + 0.5 - camera.cx) / camera.fx, (py + 0.5 - camera.cy) / camera.fy, np.ones_like(px)],
        axis=-1,
    )
    d = local @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return (o, d) + _clip(o, d, bounds)


def rays_for_pixels(cameras: Sequence[Camera], image_ids, px, py, bounds=None):
    """Rays for (image id, px, py) triples drawn from several cameras."""
    image_ids = np.asarray(image_ids)
    rot = np.stack([c.rotation for c in cameras])[image_ids]
    pos = np.stack([c.position for c in cameras])[image_ids]
    intr = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cameras])[image_ids]
    local = np.stack(
        [
            (np.asarray(px) + 0.5 - intr[:, 2]) / intr[:, 0],
            (np.asarray(py) + 0.5 - intr[:, 3]) / intr[:, 1],
            np.ones(len(image_ids)),
        ],
        axis=-1,
    )
    d = np.einsum("nij,nj->ni", rot, local)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return (pos, d) + _clip(pos, d, bounds)


def _clip(o, d, bounds):
    n = len(o)
    if bounds is None:
        return np.zeros(n), np.full(n, np.inf)
    t0, t1 = slab_intersect(o, d, bounds[0], bounds[1])
    miss = ~(t0 < t1)
    t0 = np.where(miss, 0.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return t0, t1


def save_cameras(path, cameras: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]
