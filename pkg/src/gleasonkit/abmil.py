"""Desk-scale gated attention MIL model.

The encoder is a small convolution stack standing in for a large CNN; only its
interface is fixed: a 1280-channel feature map, global average pooling and a
fully connected reduction to 1000 dimensions. Parameters are stored as
float32 and evaluated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ValidationError
from .formats import WEIGHTS_MAGIC, read_container, write_container
from .grading import PatternDistribution

PATCH_PX = 256
ENCODER_DIM = 1280
FEATURE_DIM = 1000
N_CLASSES = 4
ATTN_SUM_ATOL = 1e-9


@dataclass(frozen=True)
class EncoderSpec:
    pool: int = 16
    conv_channels: int = 16
    mix_widths: tuple = ()

    def __post_init__(self):
        if PATCH_PX % self.pool:
            raise ValidationError(f"pool factor {self.pool} must divide {PATCH_PX}")

    def shapes(self):
        c = self.conv_channels
        out = {"enc.conv.W": (c, 3, 3, 3), "enc.conv.b": (c,)}
        for i, w in enumerate(self.mix_widths):
            out[f"enc.mix{i}.W"] = (w, c)
            out[f"enc.mix{i}.b"] = (w,)
            c = w
        out["enc.proj.W"] = (ENCODER_DIM, c)
        out["enc.proj.b"] = (ENCODER_DIM,)
        out["reduce.W"] = (FEATURE_DIM, ENCODER_DIM)
        out["reduce.b"] = (FEATURE_DIM,)
        return out


@dataclass(frozen=True)
class AttentionParams:
    V: np.ndarray
    U: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        if self.V.shape != self.U.shape or self.V.shape[1:] != (FEATURE_DIM,):
            raise ValidationError("attention V and U must both be hidden_dim x 1000")
        if self.w.shape != (self.V.shape[0],):
            raise ValidationError("attention w must have length hidden_dim")
        if not all(np.all(np.isfinite(a)) for a in (self.V, self.U, self.w)):
            raise ValidationError("attention parameters must be finite")


@dataclass(frozen=True)
class BagOutput:
    distribution: PatternDistribution
    attention: np.ndarray


def _shapes(hidden_dim, encoder):
    shapes = dict(encoder.shapes()) if encoder is not None else {}
    shapes.update({
        "attn.V": (hidden_dim, FEATURE_DIM),
        "attn.U": (hidden_dim, FEATURE_DIM),
        "attn.w": (hidden_dim,),
        "head1.W": (N_CLASSES, FEATURE_DIM),
        "head1.b": (N_CLASSES,),
        "head2.W": (N_CLASSES, FEATURE_DIM),
        "head2.b": (N_CLASSES,),
    })
    return shapes


@dataclass
class AbmilModel:
    """Encoder (optional) + gated attention + primary/secondary pattern heads.

    A model without an encoder only accepts pre-extracted 1000-d features.
    """

    params: dict = field(repr=False)
    hidden_dim: int = 128
    encoder: EncoderSpec | None = EncoderSpec()

    def __post_init__(self):
        expected = _shapes(self.hidden_dim, self.encoder)
        missing = sorted(set(expected) - set(self.params))
        if missing:
            raise ValidationError(f"missing tensor {missing[0]!r}")
        for name, shape in expected.items():
            arr = np.asarray(self.params[name])
            if tuple(arr.shape) != tuple(shape):
                raise ValidationError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"tensor {name!r} has non-finite entries")
        extra = sorted(set(self.params) - set(expected))
        if extra:
            raise ValidationError(f"unexpected tensor {extra[0]!r}")
        # float32 storage precision, float64 arithmetic
        self.params = {
            k: np.asarray(self.params[k], dtype=np.float32).astype(np.float64) for k in expected
        }
        p = self.params
        self.attention = AttentionParams(p["attn.V"], p["attn.U"], p["attn.w"])

    @classmethod
    def random(cls, seed, hidden_dim=128, encoder=EncoderSpec(), head_scale=4.0):
        """Seeded random model, for tests and synthetic smoke runs."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _shapes(hidden_dim, encoder).items():
            if name.endswith(".b"):
                params[name] = rng.normal(0.0, 0.05, size=shape)
                continue
            fan_in = int(np.prod(shape[1:]))
            scale = 1.0 / np.sqrt(fan_in)
            if name.startswith("head"):
                scale *= head_scale
            params[name] = rng.normal(0.0, scale, size=shape)
        return cls(params, hidden_dim, encoder)

    @property
    def has_encoder(self):
        return self.encoder is not None


def _check_patches(patches):
    x = np.asarray(patches)
    if x.ndim != 4 or x.shape[1:] != (PATCH_PX, PATCH_PX, 3):
        raise ValidationError(f"patches must be N x {PATCH_PX} x {PATCH_PX} x 3, got {x.shape}")
    if x.dtype == np.uint8:
        return x
    x = x.astype(np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValidationError("float patches must be normalised to [0, 1]")
    return x


def encode_patches(patches, model: AbmilModel) -> np.ndarray:
    """Forward ``N x 256 x 256 x 3`` patches to an ``N x 1000`` feature matrix."""
    if not model.has_encoder:
        raise ValidationError("model has no encoder; supply pre-extracted features")
    x = _check_patches(patches)
    p = model.params
    enc = model.encoder
    n, g = len(x), PATCH_PX // enc.pool
    k = enc.pool
    # block sums: rows first (contiguous), exact in int64 for 8-bit input
    acc = np.int64 if x.dtype == np.uint8 else np.float64
    rows = x.reshape(n * g, k, PATCH_PX * 3).sum(axis=1, dtype=acc)
    x = rows.reshape(n, g, g, k, 3).sum(axis=3) / (k * k)
    if acc is np.int64:
        x = x / 255.0
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (n, g, g, c, ky, kx)
    h = np.einsum("nijcyx,ocyx->nijo", win, p["enc.conv.W"]) + p["enc.conv.b"]
    h = np.maximum(h, 0.0).reshape(n, g * g, -1)
    for i in range(len(enc.mix_widths)):
        h = np.maximum(h @ p[f"enc.mix{i}.W"].T + p[f"enc.mix{i}.b"], 0.0)
    # one patch at a time: BLAS picks kernels by matrix shape, so batching
    # would make a patch's features depend on its neighbours in the bag
    out = np.empty((n, FEATURE_DIM))
    proj_t = np.ascontiguousarray(p["enc.proj.W"].T)
    for i in range(n):
        z = h[i] @ proj_t
        z += p["enc.proj.b"]
        np.maximum(z, 0.0, out=z)
        out[i] = p["reduce.W"] @ z.mean(axis=0) + p["reduce.b"]
    return out


def encode_patch(patch, model: AbmilModel) -> np.ndarray:
    """Forward one 256x256x3 patch to its 1000-d feature vector."""
    x = np.asarray(patch)
    if x.shape != (PATCH_PX, PATCH_PX, 3):
        raise ValidationError(f"patch must be {PATCH_PX}x{PATCH_PX}x3, got {x.shape}")
    return encode_patches(x[None], model)[0]


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def gated_attention(features, params: AttentionParams) -> np.ndarray:
    """Softmax-normalised gated attention weights, one per instance."""
    H = np.asarray(features, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] == 0:
        raise ValidationError("attention needs a non-empty N x 1000 feature bag")
    if H.shape[1] != FEATURE_DIM:
        raise ValidationError(f"features must have dimension {FEATURE_DIM}, got {H.shape[1]}")
    gate = np.tanh(H @ params.V.T) * expit(H @ params.U.T)
    return _softmax(gate @ params.w)


def _heads(z, model):
    p = model.params
    return PatternDistribution(
        _softmax(p["head1.W"] @ z + p["head1.b"]),
        _softmax(p["head2.W"] @ z + p["head2.b"]),
    )


def bag_features(bag, model: AbmilModel) -> np.ndarray:
    """Encode a bag: ``N x 256 x 256 x 3`` pixels, or pass through ``N x 1000`` features."""
    arr = np.asarray(bag)
    if arr.ndim == 2:
        if arr.shape[1] != FEATURE_DIM:
            raise ValidationError(f"features must have dimension {FEATURE_DIM}")
        return arr.astype(np.float64)
    if arr.ndim != 4:
        raise ValidationError(f"bag must be N x 1000 features or N x 256 x 256 x 3 patches, got {arr.shape}")
    return encode_patches(arr, model) if len(arr) else np.zeros((0, FEATURE_DIM))


def infer_bag(bag, model: AbmilModel) -> BagOutput:
    H = bag_features(bag, model)
    if len(H) == 0:
        raise ValidationError("empty bag")
    a = gated_attention(H, model.attention)
    return BagOutput(_heads(a @ H, model), a)


def patch_pattern_probs(patch, model: AbmilModel):
    """Head probabilities for a single patch, bypassing attention (heatmap mode).

    ``patch`` may be raw pixels or an already-encoded 1000-d feature vector.
    """
    arr = np.asarray(patch)
    z = arr.astype(np.float64) if arr.shape == (FEATURE_DIM,) else encode_patch(arr, model)
    d = _heads(z, model)
    return d.primary_probs, d.secondary_probs


def save_weights(model: AbmilModel, path):
    arrays = {k: model.params[k].astype(np.float32) for k in _shapes(model.hidden_dim, model.encoder)}
    meta = {"hidden_dim": model.hidden_dim, "encoder": None}
    if model.encoder is not None:
        meta["encoder"] = {
            "pool": model.encoder.pool,
            "conv_channels": model.encoder.conv_channels,
            "mix_widths": list(model.encoder.mix_widths),
        }
    write_container(path, WEIGHTS_MAGIC, arrays, meta)


def load_weights(path, expected_hidden_dim=None) -> AbmilModel:
    arrays, meta = read_container(path, WEIGHTS_MAGIC)
    if expected_hidden_dim is not None:
        meta = dict(meta, hidden_dim=expected_hidden_dim)
    enc = meta.get("encoder")
    encoder = None if enc is None else EncoderSpec(
        int(enc["pool"]), int(enc["conv_channels"]), tuple(enc["mix_widths"])
    )
    try:
        return AbmilModel(arrays, int(meta["hidden_dim"]), encoder)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
