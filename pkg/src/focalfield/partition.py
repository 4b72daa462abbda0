"""Balanced camera clustering into blocks and nearest-block activation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class BlockAssignment:
    k: int
    camera_ids: list      # training camera ids, in clustering order
    labels: np.ndarray    # block id per entry of camera_ids
    centers: np.ndarray   # (k, 3)

    def members(self, block: int) -> list:
        return [c for c, b in zip(self.camera_ids, self.labels) if b == block]

    def block_of(self, camera_id: int) -> int:
        return int(self.labels[self.camera_ids.index(camera_id)])

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignment": {str(c): int(b) for c, b in zip(self.camera_ids, self.labels)},
            "centers": self.centers.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "BlockAssignment":
        ids = [int(c) for c in d["assignment"]]
        labels = np.array([d["assignment"][str(c)] for c in ids], dtype=np.int64)
        return cls(int(d["k"]), ids, labels, np.asarray(d["centers"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "BlockAssignment":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() == 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / d2.sum())])
    return np.array(centers)


def _balanced_assign(x, centers):
    """Greedy capacity-constrained assignment.

    Points with the largest gap between their best and second-best center go
    first, each to its nearest center that still has room.  Capacities are
    floor(m/k) plus one extra slot for m mod k clusters, so sizes differ by
    at most one.
    """
    m, k = len(x), len(centers)
    dist = np.sqrt(((x[:, None] - centers[None]) ** 2).sum(-1))
    base, extra = divmod(m, k)
    if k > 1:
        part = np.sort(dist, axis=1)
        gap = part[:, 1] - part[:, 0]
    else:
        gap = np.zeros(m)
    order = np.lexsort((np.arange(m), -gap))
    sizes = np.zeros(k, dtype=np.int64)
    n_big = 0
    labels = np.empty(m, dtype=np.int64)
    for i in order:
        for c in np.argsort(dist[i], kind="stable"):
            cap = base + 1 if (sizes[c] == base and n_big < extra) or sizes[c] > base else base
            if sizes[c] < cap:
                if sizes[c] == base:
                    n_big += 1
                sizes[c] += 1
                labels[i] = c
                break
    return labels


def balanced_cluster(positions, k: int, seed: int = 0, camera_ids=None, max_rounds: int = 100) -> BlockAssignment:
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    m = len(x)
    if not 1 <= k <= m:
        raise ValueError(f"need 1 <= k <= {m} cameras, got k={k}")
    ids = list(range(m)) if camera_ids is None else [int(c) for c in camera_ids]
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_rounds):
        new = _balanced_assign(x, centers)
        centers = np.array([x[new == c].mean(axis=0) for c in range(k)])
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    # relabel blocks by first appearance so ids do not depend on init order
    order = list(dict.fromkeys(labels.tolist()))
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return BlockAssignment(k, ids, remap[labels], centers[order])


def nearest_block(assignment: BlockAssignment, camera_position) -> int:
    """Block whose center is closest; ties go to the lowest block id."""
    d = np.linalg.norm(assignment.centers - np.asarray(camera_position, dtype=np.float64), axis=1)
    return int(np.argmin(d))
