"""Training pixel selection: uniform, error-weighted, and the hybrid of both."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

WEIGHTED = 1
UNIFORM = 0


@dataclass
class ErrorMapSet:
    """Per-image MAE maps: ``low`` at render resolution, ``full`` at image size."""

    image_ids: list
    low: list
    full: list

    def __post_init__(self):
        for m in self.full:
            if np.any(m < 0):
                raise ValueError("error maps must be non-negative")

    def map_for(self, image_id) -> np.ndarray:
        return self.full[self.image_ids.index(image_id)]


@dataclass
class PixelBatch:
    image_ids: np.ndarray
    px: np.ndarray
    py: np.ndarray
    origin: np.ndarray  # WEIGHTED / UNIFORM per entry

    def __len__(self):
        return len(self.px)

    @property
    def batch_size(self) -> int:
        return len(self)

    def entries(self):
        return list(zip(self.image_ids.tolist(), self.px.tolist(), self.py.tolist()))


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return np.asarray(img)
    h, w = img.shape[:2]
    return img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:]).mean(axis=(1, 3))


def nearest_upsample(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def mae_map(render: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Channel-mean absolute difference per pixel."""
    return np.abs(np.asarray(render, np.float64) - np.asarray(target, np.float64)).mean(axis=-1)


def compute_error_maps(render_fn, images: dict, downsample: int = 4) -> ErrorMapSet:
    """``render_fn(image_id, downsample) -> low-res rgb``; ``images``: id -> full-res ground truth."""
    ids, low, full = [], [], []
    for i, gt in images.items():
        pred = render_fn(i, downsample)
        err = mae_map(pred, box_downsample(gt, downsample))
        ids.append(i)
        low.append(err)
        full.append(nearest_upsample(err, downsample))
    return ErrorMapSet(ids, low, full)


class AliasTable:
    """Walker/Vose alias method: O(n) build, O(1) per draw."""

    def __init__(self, weights):
        p = np.asarray(weights, dtype=np.float64).ravel()
        n = len(p)
        if n == 0 or not np.all(np.isfinite(p)) or np.any(p < 0) or p.sum() <= 0:
            raise ValueError("alias table needs finite non-negative weights with positive mass")
        scaled = p * (n / p.sum())
        prob = np.ones(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        # leftovers are 1 up to rounding
        self.prob = prob
        self.alias = alias
        self.n = n

    def implied_distribution(self) -> np.ndarray:
        q = self.prob.copy()
        np.add.at(q, self.alias, 1.0 - self.prob)
        return q / self.n

    def draw(self, rng, size: int) -> np.ndarray:
        col = rng.integers(0, self.n, size=size)
        keep = rng.random(size) < self.prob[col]
        return np.where(keep, col, self.alias[col])


class PixelPool:
    """Flattened (image, pixel) candidates of a set of same-size images."""

    def __init__(self, image_ids, width: int, height: int):
        self.image_ids = np.asarray(list(image_ids), dtype=np.int64)
        self.width = width
        self.height = height
        self.per_image = width * height

    def __len__(self):
        return len(self.image_ids) * self.per_image

    def unflatten(self, flat):
        img = self.image_ids[flat // self.per_image]
        pix = flat % self.per_image
        return img, pix % self.width, pix // self.width


def sample_uniform(image_ids, batch_size: int, rng, width: int, height: int) -> PixelBatch:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pool = PixelPool(image_ids, width, height)
    img, px, py = pool.unflatten(rng.integers(0, len(pool), size=batch_size))
    return PixelBatch(img, px, py, np.full(batch_size, UNIFORM, np.int8))


class WeightedSampler:
    """Draws pixels with probability proportional to their error over the pool."""

    def __init__(self, errs: ErrorMapSet, image_ids):
        ids = list(image_ids)
        maps = [errs.map_for(i) for i in ids]
        h, w = maps[0].shape
        self.pool = PixelPool(ids, w, h)
        weights = np.concatenate([m.ravel() for m in maps])
        self.table = None
        if weights.sum() > 0:
            self.table = AliasTable(weights)
        else:
            log.warning("error maps carry no mass; weighted sampling falls back to uniform")

    def draw(self, n: int, rng) -> PixelBatch:
        if self.table is None:
            flat = rng.integers(0, len(self.pool), size=n)
        else:
            flat = self.table.draw(rng, n)
        img, px, py = self.pool.unflatten(flat)
        return PixelBatch(img, px, py, np.full(n, WEIGHTED, np.int8))


def sample_weighted(errs: ErrorMapSet, image_ids, n: int, rng) -> PixelBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    return WeightedSampler(errs, image_ids).draw(n, rng)


def hybrid_split(batch_size: int, weighted_fraction: float) -> tuple[int, int]:
    if not 0.0 <= weighted_fraction <= 1.0:
        raise ValueError("weighted_fraction must be in [0, 1]")
    n_w = int(round(weighted_fraction * batch_size))
    return n_w, batch_size - n_w


def sample_hybrid(errs, image_ids, batch_size: int, weighted_fraction: float, rng, sampler=None) -> PixelBatch:
    """Weighted draws for round(fraction * batch) entries, uniform for the rest.

    Uniform draws cover the same candidate images as the weighted ones.
    Pass a prebuilt ``sampler`` to skip rebuilding the alias table.
    """
    n_w, n_u = hybrid_split(batch_size, weighted_fraction)
    ids = list(image_ids)
    parts = []
    if n_w:
        sampler = sampler or WeightedSampler(errs, ids)
        parts.append(sampler.draw(n_w, rng))
    if n_u:
        h, w = errs.map_for(ids[0]).shape
        parts.append(sample_uniform(ids, n_u, rng, w, h))
    return PixelBatch(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("image_ids", "px", "py", "origin")))
