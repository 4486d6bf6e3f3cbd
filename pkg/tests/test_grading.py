import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gleasonkit.errors import ValidationError
from gleasonkit.grading import (GLEASON_LADDER, GleasonScore, PatternDistribution, cancer_probability,
                                is_malignant, isup_from_gleason, validate_gleason, validate_isup)

VALID = [(0, 0), (3, 3), (3, 4), (4, 3), (4, 4), (3, 5), (5, 3), (4, 5), (5, 4), (5, 5)]


@pytest.mark.parametrize("pair, grade", [((0, 0), 0), ((4, 3), 3), ((3, 5), 4), ((5, 5), 5),
                                         ((3, 3), 1), ((3, 4), 2), ((5, 3), 4), ((5, 4), 5)])
def test_isup_table(pair, grade):
    assert isup_from_gleason(GleasonScore(*pair)) == grade


def test_isup_total_and_surjective():
    grades = {isup_from_gleason(GleasonScore(*p)) for p in VALID}
    assert grades == {0, 1, 2, 3, 4, 5}
    assert set(GLEASON_LADDER) == {GleasonScore(*p) for p in VALID}


@pytest.mark.parametrize("p, s", [(0, 4), (4, 0), (2, 3), (6, 1), (3, 6)])
def test_invalid_scores(p, s):
    with pytest.raises(ValidationError):
        validate_gleason(p, s)


def test_parse():
    assert GleasonScore.parse(" 4+3 ") == GleasonScore(4, 3)
    assert str(GleasonScore(3, 4)) == "3+4"
    for bad in ("6+1", "3-4", "4", "a+b", "3+4+5"):
        with pytest.raises(ValidationError):
            GleasonScore.parse(bad)


def test_validate_isup():
    assert validate_isup(3) == 3
    for bad in (-1, 6, 2.5):
        with pytest.raises(ValidationError):
            validate_isup(bad)


@pytest.mark.parametrize("grade, expected", [(0, False), (1, True), (5, True)])
def test_is_malignant(grade, expected):
    assert is_malignant(grade) is expected


@pytest.mark.parametrize("pair", VALID)
def test_malignant_iff_not_benign(pair):
    gs = GleasonScore(*pair)
    assert is_malignant(isup_from_gleason(gs)) == (pair != (0, 0))


def _dist(b1, b2):
    rest1, rest2 = 1.0 - b1, 1.0 - b2
    return PatternDistribution(np.array([b1, rest1, 0, 0]), np.array([b2, 0, rest2, 0]))


@pytest.mark.parametrize("b1, b2, want", [(0.2, 0.5, 0.8), (1.0, 1.0, 0.0), (0.0, 0.9, 1.0)])
def test_cancer_probability_examples(b1, b2, want):
    assert cancer_probability(_dist(b1, b2)) == pytest.approx(want, abs=1e-15)


prob4 = st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda v: sum(v) > 0).map(
    lambda v: np.array(v) / sum(v))


@given(prob4, prob4, st.floats(0.0, 1.0))
def test_cancer_probability_range_and_monotone(p, s, extra):
    d = PatternDistribution(p, s)
    c = cancer_probability(d)
    assert 0.0 <= c <= 1.0
    # move a share of the non-benign mass of the primary head onto benign
    moved = p.copy()
    shift = extra * (1.0 - p[0])
    moved[0] += shift
    moved[1:] *= (1.0 - moved[0]) / moved[1:].sum() if moved[1:].sum() > 0 else 0.0
    moved = moved / moved.sum()
    assert cancer_probability(PatternDistribution(moved, s)) <= c + 1e-12


def test_distribution_validation():
    with pytest.raises(ValidationError):
        PatternDistribution(np.array([0.5, 0.5, 0.5, 0]), np.array([1.0, 0, 0, 0]))
    with pytest.raises(ValidationError):
        PatternDistribution(np.array([1.0, 0, 0]), np.array([1.0, 0, 0, 0]))
    with pytest.raises(ValidationError):
        PatternDistribution(np.array([1.5, -0.5, 0, 0]), np.array([1.0, 0, 0, 0]))
