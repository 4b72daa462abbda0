"""Two-stage training: global stage over all images, then per-block focal residuals."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .dataset import Dataset
from .decoder import DecoderConfig, RadianceDecoder, init_decoder
from .encoder import EncoderConfig, HashEncoder, init_focal, init_global
from .geometry import rays_for_pixels
from .metrics import MetricReport, psnr
from .octree import SpaceOctree
from .partition import BlockAssignment, balanced_cluster, nearest_block
from .renderer import RadianceField, composite_packed, composite_packed_backward, render_image
from .sampler import ErrorMapSet, WeightedSampler, compute_error_maps, sample_hybrid, sample_uniform

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    global_steps: int = 5000
    focal_steps_per_block: int = 3000
    batch_rays: int = 1024
    max_points_per_ray: int = 1024
    step_scale: float = 1.0
    lr_global_start: float = 1e-2
    lr_global_end: float = 1e-4
    lr_focal_start: float = 5e-3
    lr_focal_end: float = 5e-5
    epsilon: float = 1e-6
    weighted_fraction: float = 0.3
    k_blocks: int = 2
    error_map_downsample: int = 4
    error_map_refresh: int = 10000
    # octree
    initial_depth: int = 3
    max_depth: int = 6
    prune_threshold: float = 0.01
    subdivide_threshold: float = 1.0
    refine_every: int = 512
    # hash encoder
    levels: int = 8
    feats_per_level: int = 2
    base_resolution: int = 16
    max_resolution: int = 256
    log2_table_size: int = 15
    # decoder
    hidden_density: int = 64
    layers_density: int = 2
    hidden_color: int = 64
    layers_color: int = 2
    geo_features: int = 15
    # "guided": focal residual on top of the frozen global encoder;
    # "scratch": focal encoder alone, randomly initialized (ablation)
    focal_mode: str = "guided"
    # composite each training ray over a random color (needs ground-truth
    # opacity) so that empty space is pushed to zero density
    random_background: bool = True
    deterministic: bool = False
    log_every: int = 250

    def __post_init__(self):
        for name in ("global_steps", "focal_steps_per_block", "refine_every", "error_map_refresh"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_rays", "max_points_per_ray", "k_blocks", "step_scale", "epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (self.lr_global_start > self.lr_global_end > 0 and self.lr_focal_start > self.lr_focal_end > 0):
            raise ValueError("learning rates must decay from start to a positive end")
        if not 0.0 <= self.weighted_fraction <= 1.0:
            raise ValueError("weighted_fraction must lie in [0, 1]")
        if self.focal_mode not in ("guided", "scratch"):
            raise ValueError("focal_mode must be 'guided' or 'scratch'")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.levels, self.feats_per_level, self.base_resolution, self.max_resolution,
                             self.log2_table_size)

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(self.hidden_density, self.layers_density, self.hidden_color, self.layers_color,
                             self.geo_features)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Flat ``key: value`` text (YAML or JSON) mirroring the fields."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        data.update(overrides)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        cast = {"int": int, "float": float, "str": str, "bool": bool}
        return cls(**{k: cast[types[k]](v) for k, v in data.items()})


# ---------------------------------------------------------------------------
# optimization primitives

def charbonnier_loss(c_out, c_gt, epsilon=1e-6):
    """Mean of sqrt((c_out - c_gt)^2 + eps) over all entries, and its gradient."""
    diff = np.asarray(c_out, dtype=np.float64) - np.asarray(c_gt, dtype=np.float64)
    root = np.sqrt(diff * diff + epsilon)
    return float(root.mean()), diff / root / diff.size


def lr_at(step, total, start, end) -> float:
    if total <= 0:
        return float(start)
    if not 0 <= step <= total:
        raise ValueError("step outside [0, total]")
    return float(start * (end / start) ** (step / total))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    moments: dict = field(default_factory=dict)  # name -> [m, v, step]
    skipped: int = 0

    def reset(self) -> None:
        self.moments.clear()
        self.skipped = 0


def adam_step(state: AdamState, params: dict, grads: dict, lr: float, frozen=()) -> None:
    """In-place Adam with bias correction; frozen names are skipped entirely."""
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient in %s, step skipped", name)
            continue
        if name not in state.moments:
            state.moments[name] = [np.zeros_like(p), np.zeros_like(p), 0]
        slot = state.moments[name]
        m, v = slot[0], slot[1]
        slot[2] += 1
        t = slot[2]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class GlobalCheckpoint:
    octree: SpaceOctree
    encoder: HashEncoder
    decoder: RadianceDecoder
    history: list = field(default_factory=list)

    def field(self, focal: Optional[HashEncoder] = None, mode: Optional[str] = None, background=None):
        if mode is None:
            mode = "global" if focal is None else "fused"
        return RadianceField(self.octree, self.encoder, self.decoder, focal, mode, background)


@dataclass
class FocalCheckpoint:
    encoder: HashEncoder
    block_id: int
    mode: str = "guided"
    history: list = field(default_factory=list)
    error_maps: Optional[ErrorMapSet] = None


class NonFiniteLoss(RuntimeError):
    pass


def _stack_images(dataset: Dataset) -> np.ndarray:
    return np.stack([np.asarray(im, dtype=np.float32) for im in dataset.images])


class _Stepper:
    """One forward/backward/update over a pixel batch."""

    def __init__(self, field_: RadianceField, dataset: Dataset, cfg: TrainConfig, params: dict, grads: dict):
        self.field = field_
        self.cameras = dataset.cameras
        self.bounds = dataset.bounds
        self.gt = _stack_images(dataset)
        self.alpha = None
        if cfg.random_background and dataset.alphas is not None:
            self.alpha = np.stack([np.asarray(a, dtype=np.float32) for a in dataset.alphas])
        self.background = np.asarray(dataset.background, dtype=np.float64)
        self.cfg = cfg
        self.params = params
        self.grads = grads
        self.adam = AdamState()
        self.bad_steps = 0

    def __call__(self, batch, lr, rng, record_density=False) -> dict:
        f = self.field
        o, d, tn, tf = rays_for_pixels(self.cameras, batch.image_ids, batch.px, batch.py, self.bounds)
        smp = f.octree.sample_rays(o, d, tn, tf, self.cfg.step_scale, self.cfg.max_points_per_ray)
        sigma, rgb, state = f.forward(smp, d)
        target = self.gt[batch.image_ids, batch.py, batch.px].astype(np.float64)
        bg = self.background
        if self.alpha is not None:
            bg = rng.random((len(batch), 3))
            a = self.alpha[batch.image_ids, batch.py, batch.px].astype(np.float64)
            target = target + (1.0 - a)[:, None] * (bg - self.background)
        color, _, _, weights, trans = composite_packed(sigma, rgb, smp.deltas, smp.t, smp.offsets, bg)
        loss, d_color = charbonnier_loss(color, target, self.cfg.epsilon)
        if not np.isfinite(loss):
            self.bad_steps += 1
            if self.bad_steps >= 3:
                raise NonFiniteLoss("loss non-finite for 3 consecutive steps")
            return {"loss": loss, "samples_per_ray": len(smp) / len(batch)}
        self.bad_steps = 0
        d_sigma, d_rgb = composite_packed_backward(sigma, rgb, smp.deltas, smp.offsets, weights, trans, bg, d_color)
        f.backward(state, d_sigma, d_rgb)
        adam_step(self.adam, self.params, self.grads, lr)
        for g in self.grads.values():
            g[...] = 0
        if record_density:
            f.octree.record_density(smp, sigma)
        return {"loss": loss, "samples_per_ray": len(smp) / len(batch)}


def _decoder_params(dec: RadianceDecoder):
    names = [f"decoder.{i}" for i in range(len(dec.params()))]
    return dict(zip(names, dec.params())), dict(zip(names, dec.grads))


def init_global_model(dataset: Dataset, cfg: TrainConfig) -> GlobalCheckpoint:
    lo, hi = dataset.bounds
    tree = SpaceOctree.build(lo, hi, cfg.initial_depth, seed=cfg.seed, max_depth=cfg.max_depth,
                             prune_threshold=cfg.prune_threshold, subdivide_threshold=cfg.subdivide_threshold)
    enc = init_global(cfg.encoder, seed=cfg.seed)
    dec = init_decoder(cfg.encoder.width, cfg.decoder, seed=cfg.seed + 1)
    return GlobalCheckpoint(tree, enc, dec)


def train_global(dataset: Dataset, cfg: TrainConfig, callback=None) -> GlobalCheckpoint:
    """Uniform pixel batches over every training image; octree refined on a cadence."""
    train_ids = dataset.train_ids
    if not train_ids:
        raise ValueError("dataset has no training images")
    ckpt = init_global_model(dataset, cfg)
    fld = ckpt.field(background=dataset.background)
    params, grads = _decoder_params(ckpt.decoder)
    params["encoder"] = ckpt.encoder.table
    grads["encoder"] = ckpt.encoder.grad
    step_fn = _Stepper(fld, dataset, cfg, params, grads)
    rng = np.random.default_rng([cfg.seed, 0])
    h, w = dataset.images[0].shape[:2]
    for step in range(cfg.global_steps):
        batch = sample_uniform(train_ids, cfg.batch_rays, rng, w, h)
        lr = lr_at(step, cfg.global_steps, cfg.lr_global_start, cfg.lr_global_end)
        stats = step_fn(batch, lr, rng, record_density=True)
        if cfg.refine_every and (step + 1) % cfg.refine_every == 0:
            pruned, split = ckpt.octree.refine()
            stats.update(pruned=pruned, subdivided=split)
        ckpt.history.append({"step": step, **stats})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("global %5d loss %.5f spr %.1f", step, stats["loss"], stats["samples_per_ray"])
        if callback is not None:
            callback(step, stats)
    return ckpt


def partition_cameras(dataset: Dataset, cfg: TrainConfig) -> BlockAssignment:
    ids = dataset.train_ids
    pos = np.stack([dataset.cameras[i].position for i in ids])
    return balanced_cluster(pos, cfg.k_blocks, seed=cfg.seed, camera_ids=ids)


def _error_maps(fld: RadianceField, dataset: Dataset, image_ids, downsample, cfg):
    def render(i, ds):
        rgb, _ = render_image(fld, dataset.cameras[i], ds, cfg.step_scale, cfg.max_points_per_ray)
        return rgb

    return compute_error_maps(render, {i: dataset.images[i] for i in image_ids}, downsample)


def make_focal_encoder(global_ckpt: GlobalCheckpoint, cfg: TrainConfig, block_id: int) -> HashEncoder:
    if cfg.focal_mode == "scratch":
        enc = init_global(global_ckpt.encoder.config, seed=cfg.seed * 1000 + 17 + block_id,
                          dtype=global_ckpt.encoder.table.dtype)
        enc.role, enc.block_id = "focal", block_id
        return enc
    return init_focal(global_ckpt.encoder.config, like=global_ckpt.encoder, block_id=block_id)


def train_focal(global_ckpt: GlobalCheckpoint, dataset: Dataset, assignment: BlockAssignment, block_id: int,
                cfg: TrainConfig, callback=None) -> FocalCheckpoint:
    """Fit one block's focal encoder with everything from the global stage frozen."""
    if not 0 <= block_id < assignment.k:
        raise ValueError(f"block {block_id} not in assignment with k={assignment.k}")
    global_ckpt.octree.freeze()
    global_ckpt.encoder.freeze()
    global_ckpt.decoder.freeze()
    focal = make_focal_encoder(global_ckpt, cfg, block_id)
    mode = "focal" if cfg.focal_mode == "scratch" else "fused"
    fld = global_ckpt.field(focal, mode, dataset.background)
    members = assignment.members(block_id)

    # error maps come from the model the block starts from; the scratch
    # ablation keeps the global model's maps so pixel sampling stays comparable
    guide = fld if mode == "fused" else global_ckpt.field(background=dataset.background)
    errs = _error_maps(guide, dataset, members, cfg.error_map_downsample, cfg)
    sampler = WeightedSampler(errs, members)

    step_fn = _Stepper(fld, dataset, cfg, {"focal": focal.table}, {"focal": focal.grad})
    rng = np.random.default_rng([cfg.seed, 1, block_id])
    out = FocalCheckpoint(focal, block_id, cfg.focal_mode, error_maps=errs)
    for step in range(cfg.focal_steps_per_block):
        if step and cfg.error_map_refresh and step % cfg.error_map_refresh == 0:
            errs = _error_maps(fld, dataset, members, cfg.error_map_downsample, cfg)
            sampler = WeightedSampler(errs, members)
        batch = sample_hybrid(errs, members, cfg.batch_rays, cfg.weighted_fraction, rng, sampler)
        lr = lr_at(step, cfg.focal_steps_per_block, cfg.lr_focal_start, cfg.lr_focal_end)
        stats = step_fn(batch, lr, rng)
        out.history.append({"step": step, **stats})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("focal[%d] %5d loss %.5f", block_id, step, stats["loss"])
        if callback is not None:
            callback(step, stats)
    return out


# ---------------------------------------------------------------------------
# evaluation

def block_field(global_ckpt: GlobalCheckpoint, focal: Optional[HashEncoder], background, scratch=False):
    if focal is None:
        return global_ckpt.field(background=background)
    return global_ckpt.field(focal, "focal" if scratch else "fused", background)


def evaluate(global_ckpt: GlobalCheckpoint, focal_encoders: Optional[dict], assignment: Optional[BlockAssignment],
             dataset: Dataset, image_ids=None, cfg: Optional[TrainConfig] = None, keep_renders=False):
    """Render each test view with its nearest block and score it.

    ``focal_encoders=None`` evaluates the global model alone.  Returns
    ``(MetricReport, renders)`` with renders = {id: (rgb, depth)} when
    ``keep_renders`` is set.
    """
    cfg = cfg or TrainConfig()
    ids = dataset.test_ids if image_ids is None else list(image_ids)
    report = MetricReport()
    renders = {}
    for i in ids:
        cam = dataset.cameras[i]
        block = None
        focal = None
        if focal_encoders is not None:
            block = nearest_block(assignment, cam.position)
            if block not in focal_encoders:
                raise KeyError(f"no focal checkpoint for block {block}")
            focal = focal_encoders[block]
        scratch = focal is not None and cfg.focal_mode == "scratch"
        fld = block_field(global_ckpt, focal, dataset.background, scratch)
        rgb, depth = render_image(fld, cam, 1, cfg.step_scale, cfg.max_points_per_ray)
        rgb = rgb.astype(np.float32)
        extra = {} if block is None else {"block": block}
        report.add(i, rgb, dataset.images[i], **extra)
        if keep_renders:
            renders[i] = (rgb, depth.astype(np.float32))
    return report, renders


def cross_block_consistency(global_ckpt, focal_encoders: dict, dataset: Dataset, camera_ids, cfg: TrainConfig):
    """Render shared views with blocks 0 and 1 and compare them to each other.

    Returns mean absolute depth difference (over pixels both renderings see
    as opaque, opacity > 0.5) and the PSNR between the two color renderings.
    """
    scratch = cfg.focal_mode == "scratch"
    depth_diffs, psnrs = [], []
    for i in camera_ids:
        cam = dataset.cameras[i]
        outs = []
        for b in (0, 1):
            fld = block_field(global_ckpt, focal_encoders[b], dataset.background, scratch)
            rgb, depth = render_image(fld, cam, 1, cfg.step_scale, cfg.max_points_per_ray)
            outs.append((rgb, depth))
        depth_diffs.append(float(np.mean(np.abs(outs[0][1] - outs[1][1]))))
        psnrs.append(psnr(np.clip(outs[0][0], 0, 1), np.clip(outs[1][0], 0, 1)))
    return {"depth_l1": float(np.mean(depth_diffs)), "color_psnr": float(np.mean(psnrs))}


# ---------------------------------------------------------------------------
# run directories

GLOBAL_FILES = ("octree.bin", "encoder_global.bin", "decoder.bin")


def save_global(run_dir, ckpt: GlobalCheckpoint, cfg: TrainConfig, assignment: Optional[BlockAssignment] = None):
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    ckpt.octree.save(run / "octree.bin")
    ckpt.encoder.save(run / "encoder_global.bin")
    ckpt.decoder.save(run / "decoder.bin")
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    if assignment is not None:
        assignment.save(run / "blocks.json")


def load_global(run_dir) -> GlobalCheckpoint:
    run = Path(run_dir)
    return GlobalCheckpoint(SpaceOctree.load(run / "octree.bin"), HashEncoder.load(run / "encoder_global.bin"),
                            RadianceDecoder.load(run / "decoder.bin"))


def load_config(run_dir) -> TrainConfig:
    return TrainConfig(**json.loads((Path(run_dir) / "config.json").read_text()))


def focal_path(run_dir, block_id: int) -> Path:
    return Path(run_dir) / f"encoder_focal_{block_id}.bin"


def load_focal_encoders(run_dir, k: int, required=True) -> dict:
    out = {}
    for b in range(k):
        p = focal_path(run_dir, b)
        if p.exists():
            out[b] = HashEncoder.load(p)
        elif required:
            raise FileNotFoundError(f"missing focal checkpoint for block {b}: {p}")
    return out


def write_metrics(run_dir, report: MetricReport, cfg: TrainConfig, label: str, elapsed: Optional[float] = None,
                  extra: Optional[dict] = None) -> dict:
    body = {
        "label": label,
        "config_hash": cfg.hash(),
        "run_id": hashlib.sha1(f"{cfg.hash()}:{cfg.seed}:{label}".encode()).hexdigest()[:12],
        **report.to_dict(),
    }
    if extra:
        body.update(extra)
    if elapsed is not None and not cfg.deterministic:
        body["elapsed_seconds"] = round(elapsed, 3)
    Path(run_dir, "metrics.json").write_text(json.dumps(body, indent=1, sort_keys=True))
    return body


def run_pipeline(dataset: Dataset, cfg: TrainConfig, run_dir=None, blocks=None):
    """Global stage, partition, focal stage for every block, and both evaluations.

    Returns a dict with the checkpoints, the assignment and both reports.
    """
    t0 = time.perf_counter()
    g = train_global(dataset, cfg)
    assignment = partition_cameras(dataset, cfg)
    if run_dir is not None:
        save_global(run_dir, g, cfg, assignment)
    global_report, _ = evaluate(g, None, None, dataset, cfg=cfg)
    focals = {}
    for b in range(assignment.k) if blocks is None else blocks:
        fc = train_focal(g, dataset, assignment, b, cfg)
        focals[b] = fc
        if run_dir is not None:
            fc.encoder.save(focal_path(run_dir, b))
    focal_report, _ = evaluate(g, {b: fc.encoder for b, fc in focals.items()}, assignment, dataset, cfg=cfg)
    if run_dir is not None:
        write_metrics(run_dir, focal_report, cfg, "focal", time.perf_counter() - t0,
                      {"global_mean_psnr": global_report.mean_psnr, "global_mean_ssim": global_report.mean_ssim})
    return {"global": g, "focal": focals, "assignment": assignment,
            "global_report": global_report, "focal_report": focal_report}


def clone_global(ckpt: GlobalCheckpoint) -> GlobalCheckpoint:
    """Independent copy (used when several focal variants share one global run)."""
    return copy.deepcopy(ckpt)
