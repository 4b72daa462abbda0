"""Shared radiance decoder: density MLP + view-conditioned color MLP."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"GFN-DEC1"
SH_DIM = 16
# raw density bias at init: softplus(-3) ~ 0.05 starts the field nearly empty.
# From softplus(0) ~ 0.69 the first steps drive every density down together,
# overshoot deep into the flat softplus tail and never recover.
DENSITY_BIAS_INIT = -3.0

# real spherical-harmonics constants, degrees 0..3
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
       -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def dir_encoding(d) -> np.ndarray:
    """Degree-3 real SH basis of unit directions ``d`` (..., 3) -> (..., 16)."""
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        d = d / norm
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack(
        [
            np.full_like(x, _C0),
            -_C1 * y,
            _C1 * z,
            -_C1 * x,
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (2 * zz - xx - yy),
            _C2[3] * x * z,
            _C2[4] * (xx - yy),
            _C3[0] * y * (3 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (4 * zz - xx - yy),
            _C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            _C3[4] * x * (4 * zz - xx - yy),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3 * yy),
        ],
        axis=-1,
    )


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


@dataclass
class Mlp:
    weights: list
    biases: list
    activations: list  # "relu" | "none", one per layer

    def __post_init__(self):
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("incompatible layer sizes")

    @property
    def dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x):
        """Returns the output and the per-layer inputs needed for backward."""
        acts = [x]
        for w, b, a in zip(self.weights, self.biases, self.activations):
            x = x @ w
            x += b
            if a == "relu":
                np.maximum(x, 0, out=x)
            acts.append(x)
        return x, acts

    def backward(self, acts, grad_out, weight_grads=None):
        """Backprop ``grad_out``; accumulates into ``weight_grads`` if given."""
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if self.activations[i] == "relu":
                g = g * (acts[i + 1] > 0)
            if weight_grads is not None:
                weight_grads[2 * i] += acts[i].T @ g
                weight_grads[2 * i + 1] += np.ones(len(g), dtype=g.dtype) @ g
            g = g @ self.weights[i].T
        return g


def make_mlp(dims, rng, dtype=np.float32) -> Mlp:
    """He-uniform hidden layers, small uniform last layer, zero biases."""
    weights, biases, acts = [], [], []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        bound = 1e-2 if last else np.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
        acts.append("none" if last else "relu")
    return Mlp(weights, biases, acts)


@dataclass
class DecoderConfig:
    hidden_density: int = 64
    layers_density: int = 2
    hidden_color: int = 64
    layers_color: int = 2
    geo_features: int = 15


@dataclass
class RadianceDecoder:
    density_mlp: Mlp
    color_mlp: Mlp
    frozen: bool = False
    grads: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.grads is None:
            self.grads = [np.zeros_like(p) for p in self.params()]

    @property
    def geo_features(self) -> int:
        return self.density_mlp.dims[-1] - 1

    def params(self) -> list:
        return self.density_mlp.params() + self.color_mlp.params()

    def zero_grad(self) -> None:
        for g in self.grads:
            g[...] = 0

    def freeze(self) -> None:
        self.frozen = True

    def forward(self, feats, dir_enc):
        """Batched decode.  ``dir_enc`` is the SH encoding per sample."""
        h, dacts = self.density_mlp.forward(feats)
        sigma = softplus(h[:, 0])
        cin = np.concatenate([h[:, 1:], dir_enc.astype(h.dtype, copy=False)], axis=1)
        logits, cacts = self.color_mlp.forward(cin)
        rgb = sigmoid(logits)
        return sigma, rgb, (h, dacts, cacts, rgb)

    def backward(self, cache, d_sigma, d_rgb):
        """Exact reverse pass.  Returns dL/dfeatures; weight grads only when unfrozen."""
        h, dacts, cacts, rgb = cache
        dt = h.dtype
        nd = len(self.density_mlp.params())
        wg_d = None if self.frozen else self.grads[:nd]
        wg_c = None if self.frozen else self.grads[nd:]
        d_logits = (np.asarray(d_rgb, dtype=dt) * rgb * (1 - rgb)).astype(dt, copy=False)
        d_cin = self.color_mlp.backward(cacts, d_logits, wg_c)
        d_h = np.empty_like(h)
        d_h[:, 0] = np.asarray(d_sigma, dtype=dt) * sigmoid(h[:, 0])
        d_h[:, 1:] = d_cin[:, : h.shape[1] - 1]
        return self.density_mlp.backward(dacts, d_h, wg_d)

    # ---------------------------------------------------------- checkpoint
    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "density_dims": self.density_mlp.dims,
                "density_activations": self.density_mlp.activations,
                "color_dims": self.color_mlp.dims,
                "color_activations": self.color_mlp.activations,
                "frozen": self.frozen,
            },
            sort_keys=True,
        ).encode()
        payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in self.params())
        return MAGIC + struct.pack("<I", len(header)) + header + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RadianceDecoder":
        if raw[:8] != MAGIC:
            raise ValueError("not a decoder checkpoint")
        (hlen,) = struct.unpack("<I", raw[8:12])
        meta = json.loads(raw[12 : 12 + hlen])
        flat = np.frombuffer(raw[12 + hlen :], dtype="<f4").astype(np.float32)
        pos = 0
        mlps = []
        for key in ("density", "color"):
            dims = meta[f"{key}_dims"]
            ws, bs = [], []
            for n_in, n_out in zip(dims[:-1], dims[1:]):
                ws.append(flat[pos : pos + n_in * n_out].reshape(n_in, n_out).copy())
                pos += n_in * n_out
                bs.append(flat[pos : pos + n_out].copy())
                pos += n_out
            mlps.append(Mlp(ws, bs, list(meta[f"{key}_activations"])))
        return cls(mlps[0], mlps[1], frozen=meta["frozen"])

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RadianceDecoder":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def init_decoder(feat_dim: int, config: DecoderConfig = DecoderConfig(), seed: int = 0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    ddims = [feat_dim] + [config.hidden_density] * config.layers_density + [1 + config.geo_features]
    cdims = [config.geo_features + SH_DIM] + [config.hidden_color] * config.layers_color + [3]
    density = make_mlp(ddims, rng, dtype)
    density.biases[-1][0] = DENSITY_BIAS_INIT
    return RadianceDecoder(density, make_mlp(cdims, rng, dtype))


def decode(dec: RadianceDecoder, f, d):
    """Single-point decode -> (sigma, rgb)."""
    f = np.atleast_2d(np.asarray(f, dtype=dec.density_mlp.weights[0].dtype))
    sigma, rgb, _ = dec.forward(f, dir_encoding(np.atleast_2d(d)))
    return float(sigma[0]), rgb[0]


def decode_backward(dec: RadianceDecoder, f, d, d_sigma, d_rgb):
    """Single-point backward: accumulates weight grads (unless frozen), returns dL/df."""
    f = np.atleast_2d(np.asarray(f, dtype=dec.density_mlp.weights[0].dtype))
    _, _, cache = dec.forward(f, dir_encoding(np.atleast_2d(d)))
    return dec.backward(cache, np.atleast_1d(d_sigma), np.atleast_2d(d_rgb))[0]
