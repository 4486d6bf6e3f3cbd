"""Deterministic dihedral test-time augmentation and 10-model vote aggregation."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .abmil import AbmilModel, infer_bag
from .errors import ValidationError
from .grading import BENIGN, HEAD_PATTERNS, GleasonScore, cancer_probability, isup_from_gleason

N_MODELS = 10


class D4Transform(Enum):
    """The 8 symmetries of the square, in the fixed canonical order."""

    IDENTITY = 0
    ROT90 = 1
    ROT180 = 2
    ROT270 = 3
    HFLIP = 4
    VFLIP = 5
    TRANSPOSE = 6
    ANTI_TRANSPOSE = 7


_OPS = {
    D4Transform.IDENTITY: lambda x: x,
    D4Transform.ROT90: lambda x: np.rot90(x, 1, axes=(0, 1)),
    D4Transform.ROT180: lambda x: np.rot90(x, 2, axes=(0, 1)),
    D4Transform.ROT270: lambda x: np.rot90(x, 3, axes=(0, 1)),
    D4Transform.HFLIP: lambda x: x[:, ::-1],
    D4Transform.VFLIP: lambda x: x[::-1, :],
    D4Transform.TRANSPOSE: lambda x: np.swapaxes(x, 0, 1),
    D4Transform.ANTI_TRANSPOSE: lambda x: np.swapaxes(x, 0, 1)[::-1, ::-1],
}


def apply_transform(patch, t: D4Transform):
    """Pixel-exact dihedral transform of a square raster (leading two axes)."""
    x = np.asarray(patch)
    if x.ndim < 2 or x.shape[0] != x.shape[1]:
        raise ValidationError(f"transform needs a square raster, got shape {x.shape}")
    return np.ascontiguousarray(_OPS[t](x))


def apply_transform_bag(bag, t: D4Transform):
    """Apply ``t`` to every raster of an ``N x H x W [x C]`` stack."""
    x = np.asarray(bag)
    if x.ndim < 3 or x.shape[1] != x.shape[2]:
        raise ValidationError(f"transform needs a stack of square rasters, got shape {x.shape}")
    return np.ascontiguousarray(np.moveaxis(_OPS[t](np.moveaxis(x, 0, 2)), 2, 0))


def _build_tables():
    probe = np.arange(16).reshape(4, 4)
    images = {t: apply_transform(probe, t).tobytes() for t in D4Transform}
    lookup = {v: k for k, v in images.items()}
    comp = {}
    for a in D4Transform:
        for b in D4Transform:
            comp[a, b] = lookup[apply_transform(apply_transform(probe, b), a).tobytes()]
    inv = {a: next(b for b in D4Transform if comp[a, b] is D4Transform.IDENTITY) for a in D4Transform}
    return comp, inv


_COMPOSE, _INVERSE = _build_tables()


def compose(a: D4Transform, b: D4Transform) -> D4Transform:
    """Element equal to applying ``b`` first, then ``a``."""
    return _COMPOSE[a, b]


def inverse(t: D4Transform) -> D4Transform:
    return _INVERSE[t]


def transform_for_model(model_index: int) -> D4Transform:
    if not 0 <= model_index < N_MODELS:
        raise ValidationError(f"model index {model_index} outside 0..{N_MODELS - 1}")
    return D4Transform(model_index % 8)


def vote_from_heads(primary_probs, secondary_probs) -> GleasonScore:
    """Turn the two heads' argmaxes into a valid Gleason score.

    A benign primary forces 0+0; a benign secondary under a malignant primary
    becomes P+P.
    """
    p = int(HEAD_PATTERNS[int(np.argmax(primary_probs))])
    s = int(HEAD_PATTERNS[int(np.argmax(secondary_probs))])
    if p == 0:
        return BENIGN
    if s == 0:
        s = p
    return GleasonScore(p, s)


def _severity(gs: GleasonScore):
    return (isup_from_gleason(gs), gs.primary, gs.secondary)


def majority_vote(votes) -> GleasonScore:
    """Plurality winner; ties go to the higher ISUP grade, then higher primary."""
    votes = list(votes)
    if len(votes) != N_MODELS:
        raise ValidationError(f"expected {N_MODELS} votes, got {len(votes)}")
    counts = Counter(votes)
    return max(counts, key=lambda gs: (counts[gs], _severity(gs)))


def median_probability(probs) -> float:
    """Median of the 10 member probabilities (mean of 5th and 6th order statistics)."""
    v = sorted(float(x) for x in probs)
    if len(v) != N_MODELS:
        raise ValidationError(f"expected {N_MODELS} probabilities, got {len(v)}")
    if v[0] < 0.0 or v[-1] > 1.0:
        raise ValidationError("probabilities must lie in [0, 1]")
    return (v[4] + v[5]) / 2.0


@dataclass(frozen=True)
class EnsembleVerdict:
    gleason: GleasonScore
    isup: int
    cancer_prob: float
    votes: tuple
    member_probs: tuple

    def to_record(self, core_id):
        return {
            "core_id": core_id,
            "gleason": str(self.gleason),
            "isup": self.isup,
            "cancer_prob": self.cancer_prob,
            "votes": [str(v) for v in self.votes],
            "member_probs": list(self.member_probs),
        }


def aggregate(votes, member_probs) -> EnsembleVerdict:
    gs = majority_vote(votes)
    return EnsembleVerdict(gs, isup_from_gleason(gs), median_probability(member_probs),
                           tuple(votes), tuple(float(p) for p in member_probs))


def ensemble_infer(bag, models) -> EnsembleVerdict:
    """Run each of the 10 models on its own dihedral view of the bag.

    ``bag`` is ``N x 256 x 256 x 3`` pixels or ``N x 1000`` pre-extracted
    features; features carry no geometry, so no transform is applied to them.
    """
    models = list(models)
    if len(models) != N_MODELS:
        raise ValidationError(f"ensemble needs exactly {N_MODELS} models, got {len(models)}")
    arr = np.asarray(bag)
    if len(arr) == 0:
        raise ValidationError("empty bag")
    pixels = arr.ndim == 4
    votes, probs = [], []
    for i, model in enumerate(models):
        if not isinstance(model, AbmilModel):
            raise ValidationError(f"ensemble member {i} is not an AbmilModel")
        view = arr
        if pixels:
            t = transform_for_model(i)
            view = apply_transform_bag(arr, t)
        out = infer_bag(view, model)
        votes.append(vote_from_heads(out.distribution.primary_probs, out.distribution.secondary_probs))
        probs.append(cancer_probability(out.distribution))
    return aggregate(votes, probs)
