"""Anchored multi-resolution hash encoding.

One table of shape (L, levels * feats_per_level) is shared by every octree
leaf; each leaf addresses it through its own hash function.  Level ``l``
reads columns ``l*F:(l+1)*F`` of the hashed row.

Lookups are split in two so global and focal tables can share the work:
:func:`lookup` computes rows and trilinear weights (table independent), then
:func:`gather` / :func:`scatter` read or accumulate a particular table.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from .octree import OctreeNode, SpaceOctree, level_salts, warp_point

MAGIC = b"GFN-ENC1"


@dataclass
class EncoderConfig:
    levels: int = 8
    feats_per_level: int = 2
    base_resolution: int = 16
    max_resolution: int = 256
    log2_table_size: int = 15

    @property
    def table_len(self) -> int:
        return 1 << self.log2_table_size

    @property
    def width(self) -> int:
        return self.levels * self.feats_per_level

    def resolutions(self) -> np.ndarray:
        if self.levels == 1:
            return np.array([self.base_resolution], dtype=np.int64)
        growth = np.exp((np.log(self.max_resolution) - np.log(self.base_resolution)) / (self.levels - 1))
        return np.floor(self.base_resolution * growth ** np.arange(self.levels) + 1e-9).astype(np.int64)


@dataclass
class HashEncoder:
    table: np.ndarray
    config: EncoderConfig
    role: str = "global"
    block_id: Optional[int] = None
    frozen: bool = False
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        L = self.table.shape[0]
        if L & (L - 1):
            raise ValueError("table length must be a power of two")
        if self.table.shape[1] != self.config.width:
            raise ValueError("table width does not match levels * feats_per_level")
        if self.grad is None:
            self.grad = np.zeros_like(self.table)

    @property
    def table_len(self) -> int:
        return self.table.shape[0]

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def freeze(self) -> None:
        self.frozen = True

    # ---------------------------------------------------------- checkpoint
    def to_bytes(self) -> bytes:
        cfg = self.config
        header = json.dumps(
            {
                "table_len": self.table_len,
                "levels": cfg.levels,
                "feats_per_level": cfg.feats_per_level,
                "base_resolution": cfg.base_resolution,
                "max_resolution": cfg.max_resolution,
                "resolutions": cfg.resolutions().tolist(),
                "frozen": self.frozen,
                "role": self.role,
                "block_id": self.block_id,
            },
            sort_keys=True,
        ).encode()
        payload = np.ascontiguousarray(self.table, dtype="<f4").tobytes()
        return MAGIC + struct.pack("<I", len(header)) + header + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HashEncoder":
        if raw[:8] != MAGIC:
            raise ValueError("not an encoder checkpoint")
        (hlen,) = struct.unpack("<I", raw[8:12])
        meta = json.loads(raw[12 : 12 + hlen])
        cfg = EncoderConfig(meta["levels"], meta["feats_per_level"], meta["base_resolution"],
                            meta["max_resolution"], int(meta["table_len"]).bit_length() - 1)
        table = np.frombuffer(raw[12 + hlen :], dtype="<f4").reshape(meta["table_len"], cfg.width).astype(np.float32)
        return cls(table, cfg, meta["role"], meta["block_id"], meta["frozen"])

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "HashEncoder":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def init_global(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> HashEncoder:
    rng = np.random.default_rng(seed)
    table = rng.uniform(-1e-4, 1e-4, size=(config.table_len, config.width)).astype(dtype)
    return HashEncoder(table, config, role="global")


def init_focal(config: EncoderConfig, like: Optional[HashEncoder] = None, block_id=None, dtype=np.float32) -> HashEncoder:
    """Zero table so that global + focal starts out equal to global."""
    if like is not None and (like.table_len != config.table_len or like.table.shape[1] != config.width):
        raise ValueError("focal encoder dimensions must match the global encoder")
    if like is not None:
        dtype = like.table.dtype
    table = np.zeros((config.table_len, config.width), dtype=dtype)
    return HashEncoder(table, config, role="focal", block_id=block_id)


@dataclass
class Lookup:
    """Rows ``idx`` and weights ``w`` of shape (n_points, levels, 8)."""

    idx: np.ndarray
    w: np.ndarray
    feats_per_level: int


def lookup(tree: SpaceOctree, config: EncoderConfig, positions, node_ids, dtype=np.float32) -> Lookup:
    pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    ids = np.ascontiguousarray(node_ids, dtype=np.int64).reshape(-1)
    n = len(ids)
    idx = np.empty((n, config.levels, 8), dtype=np.int32)
    w = np.empty((n, config.levels, 8), dtype=dtype)
    _lookup(pos, ids, tree.node_min, tree.node_max, tree.primes, config.resolutions(),
            level_salts(config.levels), np.uint64(config.table_len - 1), idx, w)
    return Lookup(idx, w, config.feats_per_level)


def gather(table: np.ndarray, lk: Lookup) -> np.ndarray:
    out = np.empty((lk.idx.shape[0], table.shape[1]), dtype=table.dtype)
    _gather(table, lk.idx, lk.w, lk.feats_per_level, out)
    return out


def scatter(grad: np.ndarray, lk: Lookup, upstream: np.ndarray) -> None:
    """grad[row, level cols] += w * upstream, serially (deterministic order)."""
    _scatter(grad, lk.idx, lk.w, lk.feats_per_level, np.ascontiguousarray(upstream, dtype=grad.dtype))


# ------------------------------------------------------------------ point API

def _single(tree_like_node: OctreeNode, config: EncoderConfig, x, dtype):
    mini = _NodeTree(tree_like_node)
    return lookup(mini, config, np.asarray(x, dtype=np.float64)[None], [0], dtype)


class _NodeTree:
    """Adapter exposing one node with the arena attributes ``lookup`` reads."""

    def __init__(self, node: OctreeNode):
        self.node_min = node.aabb_min[None].astype(np.float64)
        self.node_max = node.aabb_max[None].astype(np.float64)
        self.primes = node.primes[None].astype(np.uint64)


def encode(enc: HashEncoder, x, node: OctreeNode) -> np.ndarray:
    warp_point(node, x)  # range check
    return gather(enc.table, _single(node, enc.config, x, enc.table.dtype))[0]


def encode_fused(global_enc: HashEncoder, focal_enc: HashEncoder, x, node: OctreeNode) -> np.ndarray:
    if global_enc.table.shape != focal_enc.table.shape:
        raise ValueError("global and focal encoders differ in shape")
    lk = _single(node, global_enc.config, x, global_enc.table.dtype)
    return gather(global_enc.table, lk)[0] + gather(focal_enc.table, lk)[0]


def encode_backward(enc: HashEncoder, x, node: OctreeNode, upstream) -> None:
    if enc.frozen:
        return
    lk = _single(node, enc.config, x, enc.table.dtype)
    scatter(enc.grad, lk, np.asarray(upstream)[None])


# ---------------------------------------------------------------- kernels

@nb.njit(cache=True)
def _lookup(pos, ids, node_min, node_max, primes, res, salts, mask, idx, w):
    levels = res.shape[0]
    z = np.empty(3)
    term = np.empty((3, 2), dtype=np.uint64)
    wt = np.empty((3, 2))
    for s in range(pos.shape[0]):
        n = ids[s]
        for a in range(3):
            v = (pos[s, a] - node_min[n, a]) / (node_max[n, a] - node_min[n, a])
            z[a] = min(max(v, 0.0), 1.0)
        for lv in range(levels):
            N = res[lv]
            for a in range(3):
                p = z[a] * N
                gi = int(np.floor(p))
                if gi > N - 1:
                    gi = N - 1
                frac = p - gi
                g = np.uint64(gi)
                # per-axis hash term g * pi + b for the lower and upper corner
                term[a, 0] = g * primes[n, a] + primes[n, a + 3]
                term[a, 1] = (g + np.uint64(1)) * primes[n, a] + primes[n, a + 3]
                wt[a, 0] = 1.0 - frac
                wt[a, 1] = frac
            for c in range(8):
                b0 = c & 1
                b1 = (c >> 1) & 1
                b2 = (c >> 2) & 1
                h = term[0, b0] ^ term[1, b1] ^ term[2, b2] ^ salts[lv]
                idx[s, lv, c] = np.int32(h & mask)
                w[s, lv, c] = wt[0, b0] * wt[1, b1] * wt[2, b2]


@nb.njit(cache=True)
def _gather(table, idx, w, F, out):
    n, levels, _ = idx.shape
    for s in range(n):
        for lv in range(levels):
            col = lv * F
            for k in range(F):
                acc = 0.0
                for c in range(8):
                    acc += w[s, lv, c] * table[idx[s, lv, c], col + k]
                out[s, col + k] = acc


@nb.njit(cache=True)
def _scatter(grad, idx, w, F, up):
    n, levels, _ = idx.shape
    for s in range(n):
        for lv in range(levels):
            for c in range(8):
                row = idx[s, lv, c]
                wc = w[s, lv, c]
                for k in range(F):
                    grad[row, lv * F + k] += wc * up[s, lv * F + k]
