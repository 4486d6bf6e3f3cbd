"""Agreement, discrimination and calibration statistics.

Count-based statistics (kappa, AUROC, C-index, sensitivity, specificity) are
accumulated in integer arithmetic and divided once at the end, so they equal
the correctly rounded value of the exact rational result.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import DegenerateError, UndefinedMetricError, ValidationError

CLIP_EPS = 1e-6
# n * observed and row @ d @ col stay below 2**63 for any K <= 10 up to this n
_INT64_SAFE_N = 10**8


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are reference categories, columns predictions."""

    labels: tuple
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    def row_normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, self.counts / np.where(rows > 0, rows, 1), 0.0)

    def to_dict(self):
        return {
            "labels": [str(x) for x in self.labels],
            "counts": self.counts.tolist(),
            "row_normalized": self.row_normalized().tolist(),
        }


def _positions(values, categories):
    """Map labels to their index in ``categories`` (or use them as integer positions)."""
    if categories is None and isinstance(values, np.ndarray) and values.dtype.kind in "iub":
        out = values.astype(np.int64)
        if out.size and out.min() < 0:
            raise ValidationError("labels must be non-negative integer positions")
        return out
    values = list(values)
    if categories is None:
        out = np.empty(len(values), dtype=np.int64)
        for k, v in enumerate(values):
            iv = int(v)
            if iv != v or iv < 0:
                raise ValidationError(f"label {v!r} is not a non-negative integer position")
            out[k] = iv
        return out
    index = {c: i for i, c in enumerate(categories)}
    try:
        return np.array([index[v] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"unknown category {exc.args[0]!r}") from None


def _contingency(ref, pred, categories=None):
    r = _positions(ref, categories)
    p = _positions(pred, categories)
    if len(r) != len(p):
        raise ValidationError(f"length mismatch: {len(r)} reference vs {len(p)} predicted labels")
    k = len(categories) if categories is not None else int(max(r.max(initial=0), p.max(initial=0))) + 1
    counts = np.bincount(r * k + p, minlength=k * k).reshape(k, k)
    return counts


def confusion_matrix(ref, pred, categories) -> ConfusionMatrix:
    return ConfusionMatrix(tuple(categories), _contingency(ref, pred, list(categories)))


def kappa_from_counts(counts, weighting="quadratic") -> float:
    """Weighted Cohen's kappa from a K x K contingency table of integer counts."""
    counts = np.asarray(counts)
    k = counts.shape[0]
    i, j = np.indices((k, k))
    if weighting == "linear":
        d = np.abs(i - j)
    elif weighting == "quadratic":
        d = (i - j) ** 2
    else:
        raise ValidationError(f"unknown weighting {weighting!r}")
    # normalising the weights by (K-1) or (K-1)^2 cancels in the ratio
    n = int(counts.sum())
    if n <= _INT64_SAFE_N:
        c = counts.astype(np.int64)
        observed = int((d * c).sum())
        expected = int(c.sum(axis=1) @ d @ c.sum(axis=0))
        if expected == 0:
            raise DegenerateError("weighted kappa undefined: zero expected disagreement (single category)")
        return (expected - n * observed) / expected
    c = [[int(v) for v in row] for row in counts]
    d = d.tolist()
    n = sum(map(sum, c))
    rows = [sum(row) for row in c]
    cols = [sum(c[a][b] for a in range(k)) for b in range(k)]
    observed = sum(d[a][b] * c[a][b] for a in range(k) for b in range(k))
    expected = sum(d[a][b] * rows[a] * cols[b] for a in range(k) for b in range(k))
    if expected == 0:
        raise DegenerateError("weighted kappa undefined: zero expected disagreement (single category)")
    return (expected - n * observed) / expected


def weighted_kappa(ref, pred, weighting="quadratic", categories=None) -> float:
    """Linear or quadratic weighted Cohen's kappa.

    Parameters
    ----------
    ref, pred : sequence
        Reference and predicted labels.
    weighting : {"linear", "quadratic"}
    categories : sequence, optional
        Ordered category list defining the ordinal scale. When omitted the
        labels themselves are taken as integer positions (e.g. ISUP 0..5).
    """
    return kappa_from_counts(_contingency(ref, pred, categories), weighting)


def _binary(v, name):
    a = np.asarray(v)
    if a.dtype == np.bool_:
        return a
    if a.size and not np.isin(a, (0, 1, True, False)).all():
        raise ValidationError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def sensitivity(ref, pred) -> float:
    r, p = _binary(ref, "ref"), _binary(pred, "pred")
    pos = int(r.sum())
    if pos == 0:
        raise UndefinedMetricError("sensitivity undefined: no positive reference cases")
    return int((r & p).sum()) / pos


def specificity(ref, pred) -> float:
    r, p = _binary(ref, "ref"), _binary(pred, "pred")
    neg = int((~r).sum())
    if neg == 0:
        raise UndefinedMetricError("specificity undefined: no negative reference cases")
    return int((~r & ~p).sum()) / neg


def sensitivity_specificity(ref, pred):
    return sensitivity(ref, pred), specificity(ref, pred)


def auroc(labels, scores) -> float:
    """Mann-Whitney AUROC: P(score+ > score-) + 0.5 P(tie)."""
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if len(y) != len(s):
        raise ValidationError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC undefined: both classes must be present")
    ranks = rankdata(s)  # mid-ranks, multiples of 0.5
    two_u = int(round(2.0 * ranks[y].sum())) - n_pos * (n_pos + 1)
    return two_u / (2 * n_pos * n_neg)


def roc_points(labels, scores):
    """ROC curve vertices ``(fpr, tpr, threshold)`` with non-decreasing FPR."""
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC undefined: both classes must be present")
    thresholds = np.unique(s)[::-1]
    pts = [(0.0, 0.0, math.inf)]
    for t in thresholds:
        called = s >= t
        pts.append((int((called & ~y).sum()) / n_neg, int((called & y).sum()) / n_pos, float(t)))
    return pts


_SPLIT = 134217729.0  # 2**27 + 1
_SPLIT_MIN = 2.0 ** -480  # below this p*p loses bits to underflow


def _square_parts(p):
    """Exact ``p*p = hi + lo`` (Dekker) for moderate ``p``."""
    hi = p * p
    c = _SPLIT * p
    ph = c - (c - p)
    pl = p - ph
    lo = ((ph * ph - hi) + 2.0 * ph * pl) + pl * pl
    return hi, lo


def exact_sum(values) -> Fraction:
    """Exact rational sum of floats.

    ``math.fsum`` is correctly rounded, so repeatedly peeling off its result
    leaves a remainder that reaches exactly zero after a few passes.
    """
    terms = [float(v) for v in values]
    parts = []
    while True:
        s = math.fsum(terms)
        if s == 0.0:
            break
        parts.append(s)
        terms.append(-s)
    return sum((Fraction(v) for v in parts), Fraction(0))


def exact_mean(values) -> float:
    """Correctly rounded mean of floats."""
    n = len(values)
    if n == 0:
        raise ValidationError("mean of empty input")
    return float(exact_sum(values) / n)


def brier(labels, probs) -> float:
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if len(y) != len(p) or len(y) == 0:
        raise ValidationError("brier needs equal-length, non-empty inputs")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValidationError("probabilities must lie in [0, 1]")
    ones = y == 1.0
    if not np.all(ones | (y == 0.0)):
        raise ValidationError("brier labels must be 0/1")
    # (p - y)^2 = p^2 - 2py + y^2, with p^2 split exactly into hi + lo
    tiny = (p > 0.0) & (p < _SPLIT_MIN)
    hi, lo = _square_parts(p[~tiny])
    terms = np.concatenate([hi, lo, -2.0 * p[ones], [float(ones.sum())]])
    total = exact_sum(terms) + sum((Fraction(float(v)) ** 2 for v in p[tiny]), Fraction(0))
    return float(total / len(y))


def _codes(v):
    """Order-preserving non-negative integer codes (unused codes are harmless)."""
    a = np.asarray(v)
    if a.dtype.kind in "iub" and a.size:
        a = a.astype(np.int64)
        lo = int(a.min())
        if int(a.max()) - lo < 64:
            return a - lo
    return rankdata(np.asarray(a, dtype=np.float64), method="dense").astype(np.int64) - 1


def _pair_counts(ref, pred):
    """(concordant, prediction-tied, total) over pairs with distinct reference values."""
    r, q = _codes(ref), _codes(pred)
    kr, kq = int(r.max()) + 1, int(q.max()) + 1
    N = np.bincount(r * kq + q, minlength=kr * kq).reshape(kr, kq)
    conc = 0
    ties = 0
    # same_col: subjects with a smaller reference and the same prediction;
    # lower: ... with a smaller reference and a smaller prediction
    same_col = np.zeros(kq, dtype=np.int64)
    for a in range(kr):
        lower = np.cumsum(same_col) - same_col
        conc += int(N[a] @ lower)
        ties += int(N[a] @ same_col)
        same_col += N[a]
    n = len(r)
    row_tot = N.sum(axis=1)
    total = (n * n - int((row_tot * row_tot).sum())) // 2
    return conc, ties, total


def ordinal_c_index(ref, pred) -> float:
    """Share of reference-discordant pairs ranked correctly; prediction ties count 1/2."""
    if len(ref) != len(pred):
        raise ValidationError("ref and pred differ in length")
    if len(ref) == 0:
        raise UndefinedMetricError("C-index undefined: no data")
    conc, ties, total = _pair_counts(ref, pred)
    if total == 0:
        raise UndefinedMetricError("C-index undefined: all reference grades are equal")
    return (2 * conc + ties) / (2 * total)


@dataclass(frozen=True)
class Recalibration:
    intercept: float
    slope: float
    se_intercept: float
    se_slope: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class CalibrationResult:
    """Binned reliability curve plus logistic recalibration on logit(prob).

    ``bins`` rows are ``(mean_predicted, observed_frequency, n)``.
    ``recalibration`` is None when the fit is degenerate (constant labels or
    constant predictions); ``note`` then says why.
    """

    bins: list
    recalibration: Recalibration | None
    note: str = ""


def logistic_irls(x, y, max_iter=100, tol=1e-10):
    """Fit ``logit P(y=1) = a + b*x`` by IRLS. Returns a :class:`Recalibration`."""
    X = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = expit(eta)
        w = mu * (1.0 - mu)
        H = X.T @ (w[:, None] * X)
        g = X.T @ (y - mu)
        step = np.linalg.solve(H, g)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    eta = X @ beta
    mu = expit(eta)
    cov = np.linalg.inv(X.T @ ((mu * (1.0 - mu))[:, None] * X))
    se = np.sqrt(np.diag(cov))
    return Recalibration(float(beta[0]), float(beta[1]), float(se[0]), float(se[1]), it, converged)


def calibration_curve(labels, probs, n_bins=10) -> CalibrationResult:
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if len(y) != len(p):
        raise ValidationError("labels and probs differ in length")
    if len(y) < 2:
        raise ValidationError("calibration needs at least 2 observations")
    p = np.clip(p, CLIP_EPS, 1.0 - CLIP_EPS)
    order = np.argsort(p, kind="mergesort")
    bins = []
    for idx in np.array_split(order, min(n_bins, len(p))):
        if len(idx):
            bins.append((exact_mean(p[idx]), float(y[idx].mean()), int(len(idx))))

    x = np.log(p / (1.0 - p))
    if y.min() == y.max():
        return CalibrationResult(bins, None, "constant labels: recalibration not identifiable")
    if x.min() == x.max():
        return CalibrationResult(bins, None, "constant predictions: recalibration slope not identifiable")
    try:
        fit = logistic_irls(x, y)
    except np.linalg.LinAlgError:
        return CalibrationResult(bins, None, "singular information matrix (separation)")
    note = "" if fit.converged else "recalibration did not converge (possible separation)"
    return CalibrationResult(bins, fit, note)
