import itertools
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalfield.encoder import (
    EncoderConfig,
    HashEncoder,
    encode,
    encode_backward,
    encode_fused,
    gather,
    init_focal,
    init_global,
    lookup,
)
from focalfield.octree import SpaceOctree, hash_index

CFG = EncoderConfig(levels=4, feats_per_level=2, base_resolution=4, max_resolution=16, log2_table_size=12)


@pytest.fixture(scope="module")
def tree():
    return SpaceOctree.build(-np.ones(3), np.ones(3), 2, seed=7)


def leaf_and_point(tree, rng):
    x = rng.uniform(-1, 1, 3)
    return tree.node(int(tree.locate(x[None])[0])), x


def oracle_encode(table, cfg, node, x):
    """Trilinear interpolation of hashed corner rows, written out level by level."""
    lo, hi = node.aabb_min, node.aabb_max
    z = [(float(x[a]) - lo[a]) / (hi[a] - lo[a]) for a in range(3)]
    out = []
    for lv, n in enumerate(cfg.resolutions()):
        base, frac = [], []
        for a in range(3):
            p = z[a] * int(n)
            g = min(int(np.floor(p)), int(n) - 1)
            base.append(g)
            frac.append(p - g)
        acc = np.zeros(cfg.feats_per_level)
        for corner in itertools.product((0, 1), repeat=3):
            w = 1.0
            for a in range(3):
                w *= frac[a] if corner[a] else 1 - frac[a]
            row = hash_index(node, [base[a] + corner[a] for a in range(3)], lv, cfg.table_len)
            acc += w * table[row, lv * cfg.feats_per_level : (lv + 1) * cfg.feats_per_level]
        out.append(acc)
    return np.concatenate(out)


def test_init_global_determinism_and_range():
    a = init_global(CFG, seed=3)
    b = init_global(CFG, seed=3)
    assert a.table.tobytes() == b.table.tobytes()
    assert np.max(np.abs(a.table)) <= 1e-4


def test_init_global_mean_statistics():
    cfg = EncoderConfig(levels=8, feats_per_level=2, log2_table_size=16)  # 2**16 * 16 ~ 1e6 entries
    t = init_global(cfg, seed=0, dtype=np.float64).table
    sigma = 1e-4 / np.sqrt(3) / np.sqrt(t.size)  # std of the mean of U(-a, a)
    assert abs(t.mean()) < 3 * sigma


def test_rejects_non_power_of_two_table():
    with pytest.raises(ValueError):
        HashEncoder(np.zeros((1000, CFG.width), np.float32), CFG)


def test_focal_init_is_zero_and_checks_dims():
    g = init_global(CFG, seed=0)
    f = init_focal(CFG, like=g, block_id=1)
    assert np.sum(np.abs(f.table)) == 0 and f.role == "focal"
    other = init_global(EncoderConfig(levels=3, feats_per_level=2, base_resolution=4, max_resolution=16,
                                      log2_table_size=12))
    with pytest.raises(ValueError):
        init_focal(CFG, like=other)


def test_zero_table_gives_zero_features(tree):
    node, x = leaf_and_point(tree, np.random.default_rng(0))
    assert not np.any(encode(init_focal(CFG), x, node))


def test_interior_points_match_oracle(tree):
    rng = np.random.default_rng(1)
    enc = init_global(CFG, seed=2, dtype=np.float64)
    enc.table[...] = rng.normal(size=enc.table.shape)
    for _ in range(100):
        node, x = leaf_and_point(tree, rng)
        np.testing.assert_allclose(encode(enc, x, node), oracle_encode(enc.table, CFG, node, x), atol=1e-12)


def test_lattice_corner_snaps_to_row(tree):
    enc = init_global(CFG, seed=2, dtype=np.float64)
    enc.table[...] = np.random.default_rng(2).normal(size=enc.table.shape)
    node = tree.node(int(tree.leaves()[5]))
    n0 = int(CFG.resolutions()[0])
    g = np.array([1, 2, 3])
    x = node.aabb_min + (node.aabb_max - node.aabb_min) * g / n0
    row = hash_index(node, g, 0, CFG.table_len)
    np.testing.assert_allclose(encode(enc, x, node)[:2], enc.table[row, :2], atol=1e-12)


def test_fused_is_sum_and_zero_focal_is_identity(tree):
    rng = np.random.default_rng(3)
    g = init_global(CFG, seed=0)
    g.table[...] = rng.normal(size=g.table.shape)
    f = init_focal(CFG, like=g)
    for _ in range(20):
        node, x = leaf_and_point(tree, rng)
        assert encode_fused(g, f, x, node).tobytes() == encode(g, x, node).tobytes()
    f.table[...] = rng.normal(size=f.table.shape).astype(np.float32)
    pts = rng.uniform(-1, 1, (1000, 3))
    lk = lookup(tree, CFG, pts, tree.locate(pts))
    node_ids = tree.locate(pts)
    for k in range(0, 1000, 97):
        node = tree.node(int(node_ids[k]))
        want = gather(g.table, lk)[k] + gather(f.table, lk)[k]
        np.testing.assert_allclose(encode_fused(g, f, pts[k], node), want, rtol=1e-6, atol=1e-7)


def test_fused_linear_response_to_focal_entry(tree):
    rng = np.random.default_rng(4)
    g = init_global(CFG, seed=0, dtype=np.float64)
    g.table[...] = rng.normal(size=g.table.shape)
    f = init_focal(CFG, like=g)
    node, x = leaf_and_point(tree, rng)
    lk = lookup(tree, CFG, x[None], [node.node_id], np.float64)
    row, w = int(lk.idx[0, 1, 3]), lk.w[0, 1, 3]
    # the same row may be hit by other corners/levels; sum their weights per column
    before = encode_fused(g, f, x, node)
    delta = 0.25
    f.table[row, 2] += delta
    after = encode_fused(g, f, x, node)
    want = np.zeros(CFG.width)
    for lv in range(CFG.levels):
        for c in range(8):
            if lk.idx[0, lv, c] == row and lv == 1:
                want[2] += delta * lk.w[0, lv, c]
    np.testing.assert_allclose(after - before, want, atol=1e-12)
    assert want[2] >= delta * w - 1e-15


def test_backward_partition_of_unity_and_zero_upstream(tree):
    cfg = EncoderConfig(levels=1, feats_per_level=2, base_resolution=8, max_resolution=8, log2_table_size=12)
    enc = init_global(cfg, seed=0, dtype=np.float64)
    node, x = leaf_and_point(tree, np.random.default_rng(5))
    encode_backward(enc, x, node, np.zeros(2))
    assert not np.any(enc.grad)
    up = np.array([0.7, -1.3])
    encode_backward(enc, x, node, up)
    np.testing.assert_allclose(enc.grad.sum(axis=0), up, atol=1e-12)


def test_backward_frozen_is_noop(tree):
    enc = init_global(CFG, seed=0)
    enc.freeze()
    node, x = leaf_and_point(tree, np.random.default_rng(6))
    encode_backward(enc, x, node, np.ones(CFG.width))
    assert not np.any(enc.grad)


def test_backward_against_finite_differences(tree):
    rng = np.random.default_rng(7)
    enc = init_global(CFG, seed=0, dtype=np.float64)
    enc.table[...] = rng.normal(size=enc.table.shape)
    pts = [leaf_and_point(tree, rng) for _ in range(30)]
    ups = rng.normal(size=(30, CFG.width))

    def objective():
        return sum(encode(enc, x, n) @ u for (n, x), u in zip(pts, ups))

    for (n, x), u in zip(pts, ups):
        encode_backward(enc, x, n, u)
    used = np.argwhere(enc.grad != 0)
    picks = used[rng.choice(len(used), 20, replace=False)]
    h = 1e-3
    for r, c in picks:
        old = enc.table[r, c]
        enc.table[r, c] = old + h
        up = objective()
        enc.table[r, c] = old - h
        down = objective()
        enc.table[r, c] = old
        fd = (up - down) / (2 * h)
        assert abs(fd - enc.grad[r, c]) <= 1e-3 * max(abs(fd), 1e-8)


def test_weights_sum_to_one_per_level(tree):
    pts = np.random.default_rng(8).uniform(-1, 1, (500, 3))
    lk = lookup(tree, CFG, pts, tree.locate(pts), np.float64)
    np.testing.assert_allclose(lk.w.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_linearity_in_table(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    tree = SpaceOctree.build(-np.ones(3), np.ones(3), 1, seed=1)
    t1 = rng.normal(size=(CFG.table_len, CFG.width))
    t2 = rng.normal(size=(CFG.table_len, CFG.width))
    x = rng.uniform(-1, 1, 3)
    node = tree.node(int(tree.locate(x[None])[0]))

    def enc_with(t):
        return encode(HashEncoder(t, CFG), x, node)

    np.testing.assert_allclose(enc_with(alpha * t1 + beta * t2), alpha * enc_with(t1) + beta * enc_with(t2),
                               atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_continuity_within_a_node(seed):
    rng = np.random.default_rng(seed)
    tree = SpaceOctree.build(-np.ones(3), np.ones(3), 1, seed=1)
    enc = HashEncoder(rng.normal(size=(CFG.table_len, CFG.width)), CFG)
    node = tree.node(int(tree.leaves()[0]))
    x = node.aabb_min + (node.aabb_max - node.aabb_min) * rng.uniform(0.1, 0.9, 3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    # Lipschitz bound: every weight moves by at most N / side per unit step; rows are bounded by max|T|
    lip = 8 * 3 * CFG.resolutions().max() / np.min(node.aabb_max - node.aabb_min) * np.max(np.abs(enc.table))
    for eps in (1e-3, 1e-5, 1e-7):
        diff = np.max(np.abs(encode(enc, x + eps * d, node) - encode(enc, x, node)))
        assert diff <= lip * eps


def test_frozen_table_survives_optimizer_steps(tree):
    from focalfield.trainer import AdamState, adam_step

    enc = init_global(CFG, seed=0)
    enc.freeze()
    before = enc.table.tobytes()
    state = AdamState()
    rng = np.random.default_rng(9)
    for _ in range(1000):
        enc.grad[...] = rng.normal(size=enc.grad.shape).astype(np.float32)
        adam_step(state, {"enc": enc.table}, {"enc": enc.grad}, 1e-2, frozen={"enc"})
    assert enc.table.tobytes() == before


def test_checkpoint_format(tmp_path):
    enc = init_global(CFG, seed=4)
    enc.role, enc.block_id = "focal", 1
    enc.save(tmp_path / "e.bin")
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:8] == b"GFN-ENC1"
    (hlen,) = struct.unpack("<I", raw[8:12])
    meta = json.loads(raw[12 : 12 + hlen])
    assert meta["role"] == "focal" and meta["block_id"] == 1 and meta["table_len"] == CFG.table_len
    assert meta["resolutions"] == CFG.resolutions().tolist()
    np.testing.assert_array_equal(np.frombuffer(raw[12 + hlen :], "<f4").reshape(enc.table.shape), enc.table)
    back = HashEncoder.load(tmp_path / "e.bin")
    assert back.table.tobytes() == enc.table.tobytes() and back.config == CFG
    with pytest.raises(ValueError):
        HashEncoder.from_bytes(b"NOTMAGIC" + raw[8:])
