"""Adaptive occupancy octree.

Leaves carry the per-region hash functions (three multipliers and three
offsets, all large primes) and an occupancy estimate.  The tree is stored
as flat node arrays so the hot loops (ray traversal, hashing) run in numba.

Leaves that fall below the prune threshold become *dead*: they stay in the
arena, keep their ids, and are skipped by ray sampling.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np

log = logging.getLogger(__name__)

LEAF = np.uint8(1)
DEAD = np.uint8(2)
NO_CHILD = -1
OCC_DECAY = 0.95
MAGIC = b"GFN-OCT1"

NODE_RECORD = np.dtype(
    [
        ("aabb", "<f8", (6,)),
        ("children", "<i4", (8,)),
        ("flags", "u1"),
        ("ema", "<f4"),
        ("primes", "<u8", (6,)),
    ],
    align=False,
)


@lru_cache(maxsize=None)
def prime_table(count: int = 65536) -> np.ndarray:
    """The ``count`` smallest primes above 2**31 (segmented sieve)."""
    lo = 2**31
    span = 32 * count
    hi = lo + span
    small = _small_primes(int(hi**0.5) + 1)
    is_prime = np.ones(span, dtype=bool)
    for p in small:
        start = (-lo) % p
        is_prime[start::p] = False
    found = lo + np.flatnonzero(is_prime)
    if len(found) < count:
        raise RuntimeError("prime segment too short")
    return found[:count].astype(np.uint64)


def _small_primes(n: int) -> np.ndarray:
    sieve = np.ones(n + 1, dtype=bool)
    sieve[:2] = False
    for i in range(2, int(n**0.5) + 1):
        if sieve[i]:
            sieve[i * i :: i] = False
    return np.flatnonzero(sieve)


def level_salts(levels: int) -> np.ndarray:
    """Fixed per-level primes XOR-ed into the hash so levels do not alias."""
    table = prime_table()
    return table[len(table) - 1 - np.arange(levels)].copy()


def node_primes(seed: int, node_ids) -> np.ndarray:
    """Six table primes per node, chosen by a (seed, node id)-keyed shuffle."""
    table = prime_table()
    ids = np.atleast_1d(np.asarray(node_ids, dtype=np.int64))
    out = np.empty((len(ids), 6), dtype=np.uint64)
    for row, n in enumerate(ids):
        rng = np.random.default_rng([int(seed), int(n)])
        out[row] = table[rng.choice(len(table), size=6, replace=False)]
    return out


@dataclass(frozen=True)
class OctreeNode:
    """Read-only view of one arena slot."""

    node_id: int
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    children: np.ndarray
    is_leaf: bool
    dead: bool
    occupancy_ema: float
    primes: np.ndarray  # (pi_1, pi_2, pi_3, b_1, b_2, b_3)

    @property
    def multipliers(self):
        return self.primes[:3]

    @property
    def offsets(self):
        return self.primes[3:]


@dataclass
class RaySampleBatch:
    """Packed samples of many rays; ray ``r`` owns ``offsets[r]:offsets[r+1]``."""

    positions: np.ndarray
    node_ids: np.ndarray
    t: np.ndarray
    deltas: np.ndarray
    ray_ids: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return len(self.t)

    @property
    def n_rays(self):
        return len(self.offsets) - 1

    def counts(self):
        return np.diff(self.offsets)


class SpaceOctree:
    def __init__(self, node_min, node_max, children, flags, ema, primes, depth, *,
                 max_depth=6, prune_threshold=0.01, subdivide_threshold=1.0, seed=0, frozen=False):
        self.node_min = node_min
        self.node_max = node_max
        self.children = children
        self.flags = flags
        self.ema = ema
        self.primes = primes
        self.depth = depth
        self.max_depth = max_depth
        self.prune_threshold = prune_threshold
        self.subdivide_threshold = subdivide_threshold
        self.seed = seed
        self.frozen = frozen

    # ------------------------------------------------------------------ build
    @classmethod
    def build(cls, root_min, root_max, initial_depth=3, *, seed=0, **kwargs) -> "SpaceOctree":
        root_min = np.asarray(root_min, dtype=np.float64)
        root_max = np.asarray(root_max, dtype=np.float64)
        if not np.all(np.isfinite(root_min)) or not np.all(root_max > root_min):
            raise ValueError("degenerate root aabb")
        if initial_depth < 1:
            raise ValueError("initial_depth must be >= 1")
        tree = cls(
            root_min[None].copy(), root_max[None].copy(), np.full((1, 8), NO_CHILD, np.int32),
            np.array([LEAF], np.uint8), np.zeros(1, np.float32), node_primes(seed, [0]),
            np.zeros(1, np.int16), seed=seed, **kwargs,
        )
        tree.max_depth = max(tree.max_depth, initial_depth)
        for _ in range(initial_depth):
            tree._split(tree.live_leaves())
        return tree

    # -------------------------------------------------------------- queries
    def __len__(self):
        return len(self.flags)

    @property
    def root_min(self):
        return self.node_min[0]

    @property
    def root_max(self):
        return self.node_max[0]

    def node(self, i: int) -> OctreeNode:
        return OctreeNode(
            int(i), self.node_min[i].copy(), self.node_max[i].copy(), self.children[i].copy(),
            bool(self.flags[i] & LEAF), bool(self.flags[i] & DEAD), float(self.ema[i]), self.primes[i].copy(),
        )

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.flags & LEAF)

    def live_leaves(self) -> np.ndarray:
        return np.flatnonzero(((self.flags & LEAF) != 0) & ((self.flags & DEAD) == 0))

    def dead_leaves(self) -> np.ndarray:
        return np.flatnonzero(((self.flags & LEAF) != 0) & ((self.flags & DEAD) != 0))

    def locate(self, points) -> np.ndarray:
        """Leaf id (live or dead) containing each point; -1 outside the root box."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return _locate(pts, self.node_min, self.node_max, self.children, self.flags)

    # ------------------------------------------------------------ sampling
    def sample_rays(self, origins, dirs, t_near, t_far, step_scale=1.0, max_points=1024) -> RaySampleBatch:
        """Front-to-back samples through live leaves, skipping dead ones.

        Each leaf crossing [a, b] is cut into ceil((b - a) / spacing) equal
        intervals with spacing = step_scale * leaf_diagonal / 16; a sample sits
        at each interval midpoint and ``deltas`` holds the interval width.
        """
        o = np.ascontiguousarray(origins, dtype=np.float64)
        d = np.ascontiguousarray(dirs, dtype=np.float64)
        tn = np.ascontiguousarray(t_near, dtype=np.float64)
        tf = np.ascontiguousarray(t_far, dtype=np.float64)
        dummy = np.empty(0)
        counts = _march(o, d, tn, tf, self.node_min, self.node_max, self.children, self.flags,
                        float(step_scale), int(max_points), False, np.zeros(len(o) + 1, np.int64),
                        dummy, dummy, np.empty(0, np.int32))
        offsets = np.zeros(len(o) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        total = int(offsets[-1])
        t0 = np.empty(total)
        t1 = np.empty(total)
        nid = np.empty(total, dtype=np.int32)
        _march(o, d, tn, tf, self.node_min, self.node_max, self.children, self.flags,
               float(step_scale), int(max_points), True, offsets, t0, t1, nid)
        ray_ids = np.repeat(np.arange(len(o), dtype=np.int64), counts)
        t = 0.5 * (t0 + t1)
        pos = o[ray_ids] + t[:, None] * d[ray_ids]
        return RaySampleBatch(pos, nid, t, t1 - t0, ray_ids, offsets)

    def sample_ray(self, ray, step_scale=1.0, max_points=1024) -> RaySampleBatch:
        return self.sample_rays(ray.origin[None], ray.direction[None], [ray.t_near], [ray.t_far],
                                step_scale, max_points)

    # ------------------------------------------------------------- updates
    def record_density(self, samples: RaySampleBatch, sigmas) -> None:
        """ema <- max(decay * ema, max sigma seen in the leaf) for touched leaves."""
        if self.frozen:
            log.warning("record_density on a frozen octree ignored")
            return
        if len(samples) == 0:
            return
        ids = samples.node_ids
        peak = np.zeros(len(self), dtype=np.float64)
        np.maximum.at(peak, ids, np.asarray(sigmas, dtype=np.float64))
        touched = np.unique(ids)
        self.ema[touched] = np.maximum(OCC_DECAY * self.ema[touched], peak[touched]).astype(np.float32)

    def refine(self) -> tuple[int, int]:
        """Prune cold live leaves, split hot ones.  Returns (pruned, subdivided)."""
        if self.frozen:
            return 0, 0
        live = self.live_leaves()
        cold = live[self.ema[live] < self.prune_threshold]
        hot = live[(self.ema[live] > self.subdivide_threshold) & (self.depth[live] < self.max_depth)]
        self.flags[cold] |= DEAD
        self._split(hot)
        return len(cold), len(hot)

    def freeze(self) -> None:
        self.frozen = True

    def _split(self, parents) -> None:
        parents = np.asarray(parents, dtype=np.int64)
        if len(parents) == 0:
            return
        n0 = len(self)
        k = len(parents)
        bits = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.float64)
        lo = self.node_min[parents]
        hi = self.node_max[parents]
        mid = 0.5 * (lo + hi)
        # child c takes the upper half along axis a when bit a of c is set
        cmin = np.where(bits[None], mid[:, None], lo[:, None]).reshape(-1, 3)
        cmax = np.where(bits[None], hi[:, None], mid[:, None]).reshape(-1, 3)
        new_ids = np.arange(n0, n0 + 8 * k, dtype=np.int32)
        self.node_min = np.concatenate([self.node_min, cmin])
        self.node_max = np.concatenate([self.node_max, cmax])
        self.children = np.concatenate([self.children, np.full((8 * k, 8), NO_CHILD, np.int32)])
        self.children[parents] = new_ids.reshape(k, 8)
        self.flags = np.concatenate([self.flags, np.full(8 * k, LEAF, np.uint8)])
        self.flags[parents] &= ~LEAF
        self.ema = np.concatenate([self.ema, np.repeat(self.ema[parents], 8)])
        self.primes = np.concatenate([self.primes, node_primes(self.seed, new_ids)])
        self.depth = np.concatenate([self.depth, np.repeat(self.depth[parents] + 1, 8).astype(np.int16)])

    # -------------------------------------------------------- serialization
    def node_records(self) -> bytes:
        rec = np.zeros(len(self), dtype=NODE_RECORD)
        rec["aabb"] = np.concatenate([self.node_min, self.node_max], axis=1)
        rec["children"] = self.children
        rec["flags"] = self.flags
        rec["ema"] = self.ema
        rec["primes"] = self.primes
        return rec.tobytes()

    def structure_hash(self) -> str:
        return hashlib.sha256(self.node_records()).hexdigest()

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "node_count": len(self),
                "max_depth": self.max_depth,
                "prune_threshold": self.prune_threshold,
                "subdivide_threshold": self.subdivide_threshold,
                "frozen": self.frozen,
                "seed": self.seed,
            },
            sort_keys=True,
        ).encode()
        return MAGIC + struct.pack("<I", len(header)) + header + self.node_records()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SpaceOctree":
        if raw[:8] != MAGIC:
            raise ValueError("not an octree checkpoint")
        (hlen,) = struct.unpack("<I", raw[8:12])
        meta = json.loads(raw[12 : 12 + hlen])
        rec = np.frombuffer(raw[12 + hlen :], dtype=NODE_RECORD)
        if len(rec) != meta["node_count"]:
            raise ValueError("truncated octree checkpoint")
        node_min = rec["aabb"][:, :3].copy()
        node_max = rec["aabb"][:, 3:].copy()
        root_extent = node_max[0, 0] - node_min[0, 0]
        depth = np.round(np.log2(root_extent / (node_max[:, 0] - node_min[:, 0]))).astype(np.int16)
        return cls(
            node_min, node_max, rec["children"].astype(np.int32), rec["flags"].copy(),
            rec["ema"].astype(np.float32), rec["primes"].astype(np.uint64), depth,
            max_depth=meta["max_depth"], prune_threshold=meta["prune_threshold"],
            subdivide_threshold=meta["subdivide_threshold"], seed=meta["seed"], frozen=meta["frozen"],
        )

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SpaceOctree":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


build = SpaceOctree.build


def warp_point(node: OctreeNode, x) -> np.ndarray:
    """Affine map of the node box onto the unit cube."""
    x = np.asarray(x, dtype=np.float64)
    z = (x - node.aabb_min) / (node.aabb_max - node.aabb_min)
    if __debug__ and (np.any(z < -1e-6) or np.any(z > 1 + 1e-6)):
        raise AssertionError(f"point {x} outside node {node.node_id}")
    return np.clip(z, 0.0, 1.0)


def unwarp_point(node: OctreeNode, z) -> np.ndarray:
    return node.aabb_min + np.asarray(z, dtype=np.float64) * (node.aabb_max - node.aabb_min)


def hash_index(node: OctreeNode, grid_coord, level: int, table_len: int) -> int:
    """Row of the anchored table for an integer lattice corner of ``node``."""
    if table_len & (table_len - 1):
        raise ValueError("table length must be a power of two")
    g = np.asarray(grid_coord, dtype=np.uint64).reshape(3)
    salt = level_salts(level + 1)[level]
    return int(_hash3(g[0], g[1], g[2], node.primes, salt) & np.uint64(table_len - 1))


# ---------------------------------------------------------------------------
# numba kernels

@nb.njit(cache=True, inline="always")
def _hash3(g1, g2, g3, primes, salt):
    h = (g1 * primes[0] + primes[3]) ^ (g2 * primes[1] + primes[4]) ^ (g3 * primes[2] + primes[5])
    return h ^ salt


@nb.njit(cache=True, inline="always")
def _slab(o, d, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return np.inf, -np.inf
        else:
            inv = 1.0 / d[a]
            ta = (lo[a] - o[a]) * inv
            tb = (hi[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@nb.njit(cache=True)
def _march(o, d, tn, tf, node_min, node_max, children, flags, step_scale, max_points, write, offsets, t0, t1, nid):
    n_rays = o.shape[0]
    counts = np.zeros(n_rays, dtype=np.int64)
    stack = np.empty(512, dtype=np.int32)
    keys = np.empty(8)
    ids = np.empty(8, dtype=np.int32)
    for r in range(n_rays):
        if not tn[r] < tf[r]:
            continue
        count = 0
        base = offsets[r]
        last = tn[r]
        sp = 1
        stack[0] = 0
        while sp > 0 and count < max_points:
            sp -= 1
            n = stack[sp]
            if flags[n] & 1:
                if flags[n] & 2:
                    continue
                a, b = _slab(o[r], d[r], node_min[n], node_max[n])
                a = max(a, last)
                b = min(b, tf[r])
                if not b - a > 1e-12:
                    continue
                diag = np.sqrt(np.sum((node_max[n] - node_min[n]) ** 2))
                spacing = step_scale * diag / 16.0
                k = int(np.ceil((b - a) / spacing))
                if k < 1:
                    k = 1
                width = (b - a) / k
                for j in range(k):
                    if count >= max_points:
                        break
                    if write:
                        t0[base + count] = a + j * width
                        t1[base + count] = a + (j + 1) * width if j < k - 1 else b
                        nid[base + count] = n
                    count += 1
                last = b
            else:
                m = 0
                for c in range(8):
                    ch = children[n, c]
                    a, b = _slab(o[r], d[r], node_min[ch], node_max[ch])
                    a = max(a, tn[r])
                    b = min(b, tf[r])
                    if b > a:
                        # insertion sort by entry distance
                        j = m
                        while j > 0 and keys[j - 1] > a:
                            keys[j] = keys[j - 1]
                            ids[j] = ids[j - 1]
                            j -= 1
                        keys[j] = a
                        ids[j] = ch
                        m += 1
                for j in range(m - 1, -1, -1):
                    stack[sp] = ids[j]
                    sp += 1
        counts[r] = count
    return counts


@nb.njit(cache=True)
def _locate(pts, node_min, node_max, children, flags):
    out = np.full(pts.shape[0], -1, dtype=np.int64)
    for i in range(pts.shape[0]):
        p = pts[i]
        inside = True
        for a in range(3):
            if p[a] < node_min[0, a] or p[a] > node_max[0, a]:
                inside = False
        if not inside:
            continue
        n = 0
        while not flags[n] & 1:
            mid = 0.5 * (node_min[n] + node_max[n])
            c = 0
            for a in range(3):
                if p[a] >= mid[a]:
                    c |= 1 << a
            n = children[n, c]
        out[i] = n
    return out
