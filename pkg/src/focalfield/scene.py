"""Analytic blob scenes: ground-truth density/albedo and a dense reference renderer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import Camera, generate_rays, make_camera


@dataclass(frozen=True)
class Blob:
    center: tuple
    radius: float
    peak_density: float
    albedo: tuple


@dataclass(frozen=True)
class BlobScene:
    blobs: tuple
    background_color: tuple = (1.0, 1.0, 1.0)
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(self.blobs))
        if not self.blobs:
            raise ValueError("scene needs at least one blob")
        lo, hi = np.asarray(self.bounds_min), np.asarray(self.bounds_max)
        if np.any(lo >= hi):
            raise ValueError("degenerate scene bounds")
        for b in self.blobs:
            c = np.asarray(b.center)
            if np.any(c < lo) or np.any(c > hi):
                raise ValueError(f"blob center {b.center} outside bounds")
            if not (math.isfinite(b.peak_density) and b.peak_density >= 0 and b.radius > 0):
                raise ValueError("blob density must be finite and >= 0, radius > 0")

    @property
    def bounds(self):
        return np.asarray(self.bounds_min, dtype=np.float64), np.asarray(self.bounds_max, dtype=np.float64)

    @cached_property
    def _arrays(self):
        return (
            np.array([b.center for b in self.blobs], dtype=np.float64),
            np.array([b.radius for b in self.blobs], dtype=np.float64),
            np.array([b.peak_density for b in self.blobs], dtype=np.float64),
            np.array([b.albedo for b in self.blobs], dtype=np.float64),
        )

    def to_dict(self) -> dict:
        return {
            "blobs": [
                {"center": list(b.center), "radius": b.radius, "peak_density": b.peak_density, "albedo": list(b.albedo)}
                for b in self.blobs
            ],
            "background_color": list(self.background_color),
            "bounds": [list(self.bounds_min), list(self.bounds_max)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlobScene":
        blobs = [Blob(tuple(b["center"]), b["radius"], b["peak_density"], tuple(b["albedo"])) for b in d["blobs"]]
        return cls(blobs, tuple(d["background_color"]), tuple(d["bounds"][0]), tuple(d["bounds"][1]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "BlobScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def oracle_field(scene: BlobScene, x):
    """Density and albedo at points ``x`` of shape (..., 3).

    Each blob is a Gaussian with std radius/2, cut to zero beyond 2 * radius.
    Albedo is the density-weighted blend of blob albedos.
    """
    return _blob_field(scene._arrays, scene.bounds, scene.background_color, x)


def _blob_field(arrays, bounds, background, x):
    centers, radii, peaks, albedos = arrays
    x = np.asarray(x, dtype=np.float64)
    d2 = np.sum((x[..., None, :] - centers) ** 2, axis=-1)
    contrib = peaks * np.exp(-d2 / (2 * (radii / 2) ** 2))
    contrib = np.where(d2 <= (2 * radii) ** 2, contrib, 0.0)
    lo, hi = bounds
    inside = np.all((x >= lo) & (x <= hi), axis=-1)
    contrib = contrib * inside[..., None]
    sigma = contrib.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        albedo = (contrib @ albedos) / sigma[..., None]
    albedo = np.where(sigma[..., None] > 0, albedo, np.asarray(background, dtype=np.float64))
    return sigma, albedo


def _blobs_near_rays(arrays, o, d):
    """Indices of blobs whose support some ray of the set passes through."""
    centers, radii = arrays[0], arrays[1]
    rel = centers[None] - o[:, None]
    along = np.maximum(np.einsum("rbk,rk->rb", rel, d), 0.0)
    perp2 = np.sum((rel - along[..., None] * d[:, None]) ** 2, axis=-1)
    return np.flatnonzero(np.any(perp2 <= (2 * radii) ** 2, axis=0))


def march_field(field_fn, origins, dirs, t_near, t_far, steps_per_ray, background):
    """Midpoint-rule compositing of ``field_fn(points) -> (sigma, albedo)`` along rays.

    Delta is (t_far - t_near) / steps for every sample.  Returns
    (rgb (R, 3), depth (R,), opacity (R,)); rays with zero opacity get depth t_far.
    """
    bg = np.asarray(background, dtype=np.float64)
    span = t_far - t_near
    frac = (np.arange(steps_per_ray) + 0.5) / steps_per_ray
    t = t_near[:, None] + span[:, None] * frac
    delta = (span / steps_per_ray)[:, None]
    sigma, albedo = field_fn(origins[:, None, :] + t[..., None] * dirs[:, None, :])
    tau = sigma * delta
    trans = np.exp(-np.concatenate([np.zeros((len(t), 1)), np.cumsum(tau, axis=1)], axis=1))
    weights = trans[:, :-1] * -np.expm1(-tau)
    rgb = np.einsum("rs,rsc->rc", weights, albedo) + trans[:, -1:] * bg
    opacity = weights.sum(axis=1)
    depth = np.where(opacity > 0, (weights * t).sum(axis=1) / np.maximum(opacity, 1e-6), t_far)
    return rgb, depth, opacity


def render_reference(scene: BlobScene, camera: Camera, steps_per_ray: int = 512, chunk: int = 256, return_depth=False,
                     return_opacity=False):
    """Dense midpoint-rule volume rendering of the analytic field.

    Returns the image, followed by depth and/or opacity maps when requested.
    """
    if steps_per_ray < 256:
        raise ValueError("reference rendering needs at least 256 steps per ray")
    h, w = camera.height, camera.width
    py, px = np.mgrid[0:h, 0:w]
    o, d, tn, tf = generate_rays(camera, px.ravel(), py.ravel(), scene.bounds)
    bg = np.asarray(scene.background_color, dtype=np.float64)
    out = np.empty((h * w, 3))
    depth = np.empty(h * w)
    alpha = np.empty(h * w)
    for s in range(0, h * w, chunk):
        sl = slice(s, s + chunk)
        # only blobs whose support some ray of the chunk passes through
        near = _blobs_near_rays(scene._arrays, o[sl], d[sl])
        sub = tuple(a[near] for a in scene._arrays)
        out[sl], depth[sl], alpha[sl] = march_field(
            lambda x: _blob_field(sub, scene.bounds, bg, x), o[sl], d[sl], tn[sl], tf[sl], steps_per_ray, bg
        )
    out_maps = [out.reshape(h, w, 3)]
    if return_depth:
        out_maps.append(depth.reshape(h, w))
    if return_opacity:
        out_maps.append(alpha.reshape(h, w))
    return out_maps[0] if len(out_maps) == 1 else tuple(out_maps)


# --------------------------------------------------------------------------
# scene + camera rig generators

def random_blobs(rng, n, lo, hi, radius=(0.08, 0.2), density=(15.0, 40.0)):
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    blobs = []
    for _ in range(n):
        blobs.append(
            Blob(
                center=tuple(float(v) for v in rng.uniform(lo, hi)),
                radius=float(rng.uniform(*radius)),
                peak_density=float(rng.uniform(*density)),
                albedo=tuple(float(v) for v in rng.uniform(0.05, 0.95, size=3)),
            )
        )
    return blobs


def make_blob_scene(n_blobs=8, seed=0) -> BlobScene:
    rng = np.random.default_rng(seed)
    return BlobScene(random_blobs(rng, n_blobs, (-0.5, -0.5, -0.3), (0.5, 0.5, 0.3)))


def make_two_district_scene(blobs_per_district=12, seed=0) -> BlobScene:
    """Two blob clusters separated along x, leaving an empty corridor between them."""
    rng = np.random.default_rng(seed)
    left = random_blobs(rng, blobs_per_district, (-0.85, -0.45, -0.35), (-0.25, 0.45, 0.35))
    right = random_blobs(rng, blobs_per_district, (0.25, -0.45, -0.35), (0.85, 0.45, 0.35))
    return BlobScene(left + right)


def orbit_cameras(center, radius, n, width, height, elevations=(20.0, 45.0), fov_deg=45.0, split="train",
                  azimuth_range=(0.0, 360.0), phase=0.0):
    """Cameras on a partial sphere around ``center`` looking at it."""
    center = np.asarray(center, dtype=np.float64)
    a0, a1 = azimuth_range
    full = abs((a1 - a0) - 360.0) < 1e-9
    az = np.linspace(a0, a1, n, endpoint=not full) + phase
    el = np.linspace(elevations[0], elevations[1], n) if n > 1 else np.array([np.mean(elevations)])
    el = np.roll(el, n // 3)
    cams = []
    for a, e in zip(np.radians(az), np.radians(el)):
        eye = center + radius * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
        cams.append(make_camera(eye, center, width, height, fov_deg, split))
    return cams


def two_district_cameras(n_train=40, n_test_per_district=3, n_boundary=3, width=64, height=64, radius=1.8):
    """Train cameras split between the two districts plus held-out test views.

    Boundary cameras look at the corridor between districts and are the
    shared views used for cross-block consistency checks.  Returns
    ``(cameras, boundary_ids)``.
    """
    per = n_train // 2
    cams = []
    for cx, arc in ((-0.55, (90.0, 270.0)), (0.55, (-90.0, 90.0))):
        cams += orbit_cameras((cx, 0, 0), radius, per, width, height, azimuth_range=arc, split="train")
    for cx, arc in ((-0.55, (90.0, 270.0)), (0.55, (-90.0, 90.0))):
        step = (arc[1] - arc[0]) / max(per - 1, 1)
        cams += orbit_cameras(
            (cx, 0, 0), radius, n_test_per_district, width, height, elevations=(28.0, 38.0),
            azimuth_range=(arc[0] + step / 2, arc[1] - step / 2), split="test",
        )
    boundary = orbit_cameras(
        (0, 0, 0), 2.2, n_boundary, width, height, elevations=(25.0, 35.0),
        azimuth_range=(75.0, 105.0), split="test",
    )
    boundary_ids = list(range(len(cams), len(cams) + len(boundary)))
    return cams + boundary, boundary_ids
