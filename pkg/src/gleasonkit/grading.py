"""Gleason/ISUP grading primitives.

Patterns are restricted to the four model classes {benign, 3, 4, 5}; benign
cores are always encoded as the score 0+0 (ISUP 0).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ValidationError

PROB_ATOL = 1e-6


class GleasonPattern(IntEnum):
    BENIGN = 0
    P3 = 3
    P4 = 4
    P5 = 5


# Class order of the model heads.
HEAD_PATTERNS = (GleasonPattern.BENIGN, GleasonPattern.P3, GleasonPattern.P4, GleasonPattern.P5)

_ISUP_TABLE = {
    (0, 0): 0,
    (3, 3): 1,
    (3, 4): 2,
    (4, 3): 3,
    (4, 4): 4,
    (3, 5): 4,
    (5, 3): 4,
    (4, 5): 5,
    (5, 4): 5,
    (5, 5): 5,
}


@dataclass(frozen=True, order=True)
class GleasonScore:
    primary: int
    secondary: int

    def __post_init__(self):
        for name, v in (("primary", self.primary), ("secondary", self.secondary)):
            if v not in (0, 3, 4, 5):
                raise ValidationError(f"{name} pattern {v!r} not in {{0,3,4,5}}")
        if (self.primary == 0) != (self.secondary == 0):
            raise ValidationError(
                f"mixed benign/malignant score {self.primary}+{self.secondary}; benign must be 0+0"
            )
        # normalise numpy ints etc. to plain int
        object.__setattr__(self, "primary", int(self.primary))
        object.__setattr__(self, "secondary", int(self.secondary))

    def __str__(self):
        return f"{self.primary}+{self.secondary}"

    @classmethod
    def parse(cls, text: str) -> "GleasonScore":
        """Parse ``"P+S"``; raises :class:`ValidationError` on anything else."""
        parts = str(text).strip().split("+")
        if len(parts) != 2:
            raise ValidationError(f"malformed Gleason score {text!r}, expected 'P+S'")
        try:
            p, s = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValidationError(f"malformed Gleason score {text!r}, expected 'P+S'") from None
        return validate_gleason(p, s)

    @property
    def isup(self) -> int:
        return isup_from_gleason(self)

    @property
    def ladder_index(self) -> int:
        return GLEASON_LADDER.index(self)


BENIGN = GleasonScore(0, 0)

# Ordinal ladder for Gleason-score agreement statistics (5+3 placed next to 3+5).
GLEASON_LADDER = tuple(
    GleasonScore(p, s)
    for p, s in [(0, 0), (3, 3), (3, 4), (4, 3), (4, 4), (3, 5), (5, 3), (4, 5), (5, 4), (5, 5)]
)
ISUP_GRADES = (0, 1, 2, 3, 4, 5)


def validate_gleason(primary: int, secondary: int) -> GleasonScore:
    return GleasonScore(primary, secondary)


def validate_isup(grade) -> int:
    g = int(grade)
    if g != grade or g not in ISUP_GRADES:
        raise ValidationError(f"ISUP grade {grade!r} not in 0..5")
    return g


def isup_from_gleason(gs: GleasonScore) -> int:
    """Map a Gleason score to its ISUP grade group (0 = benign)."""
    try:
        return _ISUP_TABLE[(gs.primary, gs.secondary)]
    except KeyError:
        raise ValidationError(f"invalid Gleason score {gs}") from None


def is_malignant(grade: int) -> bool:
    return grade > 0


def _check_prob_vector(name, v):
    v = np.asarray(v, dtype=float)
    if v.shape != (4,):
        raise ValidationError(f"{name} must be a 4-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ValidationError(f"{name} components must lie in [0, 1]")
    if abs(v.sum() - 1.0) > PROB_ATOL:
        raise ValidationError(f"{name} sums to {v.sum():.9g}, expected 1")
    return v


@dataclass(frozen=True)
class PatternDistribution:
    """Primary and secondary head probabilities over (benign, 3, 4, 5)."""

    primary_probs: np.ndarray
    secondary_probs: np.ndarray

    def __post_init__(self):
        p = _check_prob_vector("primary_probs", self.primary_probs)
        s = _check_prob_vector("secondary_probs", self.secondary_probs)
        p.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "primary_probs", p)
        object.__setattr__(self, "secondary_probs", s)


def cancer_probability(dist: PatternDistribution) -> float:
    """1 minus the smaller of the two heads' benign probabilities.

    Taking the minimum favours sensitivity: a core counts as suspicious as
    soon as either head moves mass away from benign.
    """
    p = 1.0 - min(float(dist.primary_probs[0]), float(dist.secondary_probs[0]))
    return min(1.0, max(0.0, p))
