"""Volume compositing with an exact backward pass, and full-frame rendering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from .decoder import RadianceDecoder, dir_encoding
from .encoder import HashEncoder, gather, lookup, scatter
from .geometry import Camera, generate_rays
from .octree import RaySampleBatch, SpaceOctree


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: float
    opacity: float
    weights: np.ndarray
    trans: np.ndarray  # T_1..T_{N+1}


def composite(sigmas, colors, deltas, ts, background=(1.0, 1.0, 1.0), t_far=None) -> RenderOutput:
    """Single-ray compositing in float64."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    deltas = np.asarray(deltas, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    n = len(sigmas)
    if not (len(colors) == len(deltas) == len(ts) == n):
        raise ValueError("sample arrays differ in length")
    bg = np.asarray(background, dtype=np.float64)
    if n == 0:
        return RenderOutput(bg.copy(), float(t_far if t_far is not None else np.inf), 0.0, np.zeros(0), np.ones(1))
    if np.any(deltas <= 0) or np.any(sigmas < 0):
        raise ValueError("need deltas > 0 and sigmas >= 0")
    offsets = np.array([0, n], dtype=np.int64)
    color, depth, opacity, weights, trans = composite_packed(sigmas, colors, deltas, ts, offsets, bg)
    return RenderOutput(color[0], float(depth[0]), float(opacity[0]), weights, trans)


def composite_backward(out: RenderOutput, sigmas, colors, deltas, d_color, background=(1.0, 1.0, 1.0)):
    """Gradients of the composited color w.r.t. sigmas and sample colors."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    deltas = np.asarray(deltas, dtype=np.float64)
    offsets = np.array([0, len(sigmas)], dtype=np.int64)
    d_color = np.asarray(d_color, dtype=np.float64).reshape(1, 3)
    return composite_packed_backward(sigmas, colors, deltas, offsets, out.weights, out.trans,
                                     np.asarray(background, dtype=np.float64), d_color)


def composite_packed(sigmas, colors, deltas, ts, offsets, background):
    """Composite many rays stored back to back.

    Returns (color (R,3), depth (R,), opacity (R,), weights (S,), trans (S+R,)),
    where ``trans`` holds T_1..T_{N_r+1} for every ray, ray r starting at
    ``offsets[r] + r``.  ``background`` is one color (3,) or one per ray (R, 3).
    """
    n_rays = len(offsets) - 1
    color = np.empty((n_rays, 3))
    depth = np.empty(n_rays)
    opacity = np.empty(n_rays)
    weights = np.empty(len(sigmas))
    trans = np.empty(len(sigmas) + n_rays)
    _composite(
        np.ascontiguousarray(sigmas, dtype=np.float64), np.ascontiguousarray(colors, dtype=np.float64),
        np.ascontiguousarray(deltas, dtype=np.float64), np.ascontiguousarray(ts, dtype=np.float64),
        offsets, _per_ray(background, n_rays), color, depth, opacity, weights, trans,
    )
    return color, depth, opacity, weights, trans


def composite_packed_backward(sigmas, colors, deltas, offsets, weights, trans, background, d_color):
    d_sigma = np.empty(len(sigmas))
    d_rgb = np.empty((len(sigmas), 3))
    _composite_backward(
        np.ascontiguousarray(sigmas, dtype=np.float64), np.ascontiguousarray(colors, dtype=np.float64),
        np.ascontiguousarray(deltas, dtype=np.float64), offsets, weights, trans,
        _per_ray(background, len(offsets) - 1), np.ascontiguousarray(d_color, dtype=np.float64), d_sigma, d_rgb,
    )
    return d_sigma, d_rgb


def _per_ray(background, n_rays):
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 1:
        bg = np.broadcast_to(bg, (n_rays, 3))
    if bg.shape != (n_rays, 3):
        raise ValueError("background must be (3,) or (n_rays, 3)")
    return np.ascontiguousarray(bg)


@nb.njit(cache=True)
def _composite(sigmas, colors, deltas, ts, offsets, bg, color, depth, opacity, weights, trans):
    for r in range(len(offsets) - 1):
        s0 = offsets[r]
        s1 = offsets[r + 1]
        tb = s0 + r
        log_t = 0.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        acc_w = 0.0
        acc_t = 0.0
        for i in range(s0, s1):
            tau = deltas[i] * sigmas[i]
            t_i = np.exp(-log_t)
            trans[tb + i - s0] = t_i
            w = t_i * -np.expm1(-tau)
            weights[i] = w
            cr += w * colors[i, 0]
            cg += w * colors[i, 1]
            cb += w * colors[i, 2]
            acc_w += w
            acc_t += w * ts[i]
            log_t += tau
        t_end = np.exp(-log_t)
        trans[tb + s1 - s0] = t_end
        color[r, 0] = cr + t_end * bg[r, 0]
        color[r, 1] = cg + t_end * bg[r, 1]
        color[r, 2] = cb + t_end * bg[r, 2]
        opacity[r] = acc_w
        if s1 > s0:
            depth[r] = acc_t / max(acc_w, 1e-6)
        else:
            depth[r] = np.nan


@nb.njit(cache=True)
def _composite_backward(sigmas, colors, deltas, offsets, weights, trans, bg, d_color, d_sigma, d_rgb):
    for r in range(len(offsets) - 1):
        s0 = offsets[r]
        s1 = offsets[r + 1]
        tb = s0 + r
        g0 = d_color[r, 0]
        g1 = d_color[r, 1]
        g2 = d_color[r, 2]
        t_end = trans[tb + s1 - s0]
        # suffix = sum_{j>i} w_j c_j + T_{N+1} * bg, dotted with d_color
        suffix = t_end * (bg[r, 0] * g0 + bg[r, 1] * g1 + bg[r, 2] * g2)
        for i in range(s1 - 1, s0 - 1, -1):
            w = weights[i]
            d_rgb[i, 0] = w * g0
            d_rgb[i, 1] = w * g1
            d_rgb[i, 2] = w * g2
            c_dot = colors[i, 0] * g0 + colors[i, 1] * g1 + colors[i, 2] * g2
            t_next = trans[tb + i - s0 + 1]
            d_sigma[i] = deltas[i] * (t_next * c_dot - suffix)
            suffix += w * c_dot


# ---------------------------------------------------------------------------

@dataclass
class RadianceField:
    """Octree + encoders + decoder, evaluated at packed ray samples.

    ``mode``: "global" uses the global encoder only, "fused" adds the focal
    residual, "focal" uses the focal encoder alone (scratch ablation).
    """

    octree: SpaceOctree
    global_encoder: HashEncoder
    decoder: RadianceDecoder
    focal_encoder: Optional[HashEncoder] = None
    mode: str = "global"
    background: np.ndarray = None

    def __post_init__(self):
        if self.background is None:
            self.background = np.ones(3)
        if self.mode != "global" and self.focal_encoder is None:
            raise ValueError(f"mode {self.mode!r} needs a focal encoder")

    @property
    def config(self):
        return self.global_encoder.config

    @property
    def dtype(self):
        return self.global_encoder.table.dtype

    def features(self, lk):
        if self.mode == "global":
            return gather(self.global_encoder.table, lk)
        if self.mode == "focal":
            return gather(self.focal_encoder.table, lk)
        return gather(self.global_encoder.table, lk) + gather(self.focal_encoder.table, lk)

    def forward(self, samples: RaySampleBatch, dirs):
        """Per-sample (sigma, rgb) plus the state needed by :meth:`backward`."""
        lk = lookup(self.octree, self.config, samples.positions, samples.node_ids, self.dtype)
        feats = self.features(lk)
        sh = dir_encoding(dirs)[samples.ray_ids]
        sigma, rgb, cache = self.decoder.forward(feats, sh)
        return sigma, rgb, (lk, cache)

    def backward(self, state, d_sigma, d_rgb) -> None:
        """Accumulate parameter gradients (frozen parts are skipped)."""
        lk, cache = state
        d_feat = self.decoder.backward(cache, d_sigma, d_rgb)
        targets = {"global": [self.global_encoder], "focal": [self.focal_encoder],
                   "fused": [self.global_encoder, self.focal_encoder]}[self.mode]
        for enc in targets:
            if not enc.frozen:
                scatter(enc.grad, lk, d_feat)

    def render_rays(self, origins, dirs, t_near, t_far, step_scale=1.0, max_points=1024, chunk=4096):
        """Color, depth and opacity for a set of rays (no gradients)."""
        n = len(origins)
        color = np.empty((n, 3))
        depth = np.empty(n)
        opacity = np.empty(n)
        for s in range(0, n, chunk):
            sl = slice(s, s + chunk)
            smp = self.octree.sample_rays(origins[sl], dirs[sl], t_near[sl], t_far[sl], step_scale, max_points)
            sigma, rgb, _ = self.forward(smp, dirs[sl])
            c, d, a, _, _ = composite_packed(sigma, rgb, smp.deltas, smp.t, smp.offsets, self.background)
            color[sl] = c
            depth[sl] = np.where(np.isnan(d), t_far[sl], d)
            opacity[sl] = a
        return color, depth, opacity


def render_image(field: RadianceField, camera: Camera, downsample: int = 1, step_scale=1.0, max_points=1024):
    """Full frame at (width/downsample) x (height/downsample).  Returns (rgb, depth)."""
    cam = camera.downsampled(downsample)
    py, px = np.mgrid[0 : cam.height, 0 : cam.width]
    o, d, tn, tf = generate_rays(cam, px.ravel(), py.ravel(), (field.octree.root_min, field.octree.root_max))
    color, depth, _ = field.render_rays(o, d, tn, tf, step_scale, max_points)
    return color.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)
