"""Cohort-level analyses: subgroup tables, temporal strata and inter-observer agreement."""
from __future__ import annotations

import datetime as dt
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np

from . import metrics as M
from .bootstrap import N_BOOT, bootstrap_many, derive_seed
from .cohort import AI
from .errors import UndefinedMetricError, ValidationError
from .grading import GLEASON_LADDER, ISUP_GRADES, isup_from_gleason

_LADDER = {gs: i for i, gs in enumerate(GLEASON_LADDER)}


# ---------------------------------------------------------------- temporal strata

@dataclass(frozen=True)
class Stratum:
    label: str
    start: dt.date
    end: dt.date
    lo: Fraction  # day offset from the plan origin, inclusive
    hi: Fraction  # exclusive, except for the last stratum


@dataclass(frozen=True)
class StratificationPlan:
    origin: dt.date
    strata: tuple
    target_distribution: dict
    seed: int = 0

    def __post_init__(self):
        for a, b in zip(self.strata, self.strata[1:]):
            if a.hi > b.lo:
                raise ValidationError("strata intervals must be ordered and disjoint")
        total = sum(self.target_distribution.values())
        if self.target_distribution and abs(float(total) - 1.0) > 1e-9:
            raise ValidationError("target distribution must sum to 1")

    def stratum_of(self, date: dt.date):
        off = (date - self.origin).days
        last = len(self.strata) - 1
        for i, s in enumerate(self.strata):
            if s.lo <= off < s.hi or (i == last and off == s.hi):
                return s.label
        return None


def _usable(records, reference):
    return [r for r in records if r.collection_date is not None and r.grade(reference) is not None]


def pooled_distribution(records, reference):
    counts = Counter(isup_from_gleason(r.grade(reference)) for r in records)
    n = sum(counts.values())
    return {g: Fraction(counts[g], n) for g in ISUP_GRADES if counts[g]}


def temporal_bins(records, k, reference, seed=0) -> StratificationPlan:
    """``k`` equal-width collection-date intervals spanning the observed range.

    Interval edges are exact fractional day offsets; each interval is
    half-open ``[lo, hi)`` and the global maximum joins the last interval.
    Labels show the edges truncated to whole days.
    """
    if k < 2:
        raise ValidationError("temporal binning needs k >= 2")
    usable = _usable(records, reference)
    if not usable:
        raise ValidationError("no records with both a collection date and a reference grade")
    dates = [r.collection_date for r in usable]
    first, last = min(dates), max(dates)
    span = (last - first).days
    if span == 0:
        raise ValidationError("all collection dates are identical; cannot bin")
    edges = [Fraction(span * i, k) for i in range(k + 1)]
    strata = []
    for i in range(k):
        start = first + dt.timedelta(days=math.floor(edges[i]))
        end = first + dt.timedelta(days=math.floor(edges[i + 1]))
        strata.append(Stratum(f"{start.isoformat()} ~ {end.isoformat()}", start, end, edges[i], edges[i + 1]))
    return StratificationPlan(first, tuple(strata), pooled_distribution(usable, reference), seed)


def assign_strata(records, plan: StratificationPlan):
    out = {s.label: [] for s in plan.strata}
    for r in records:
        if r.collection_date is None:
            continue
        label = plan.stratum_of(r.collection_date)
        if label is not None:
            out[label].append(r)
    return out


@dataclass
class ResampleResult:
    records: list
    feasible_size: dict
    keeps: dict
    counts: dict
    flagged: list = field(default_factory=list)
    audit: list = field(default_factory=list)


def apportion(m, target):
    """Largest-remainder rounding of ``m * p_g`` that sums to exactly ``m``.

    Every share is the floor or ceiling of its exact quota, so each grade's
    proportion of the kept stratum lies within ``1/m`` of ``p_g``. Equal
    remainders go to the lower grade first.
    """
    quota = {g: m * p for g, p in target.items()}
    out = {g: math.floor(q) for g, q in quota.items()}
    spare = m - sum(out.values())
    for g in sorted(quota, key=lambda g: (-(quota[g] - out[g]), g))[:spare]:
        out[g] += 1
    return out


def grade_balanced_resample(records, plan: StratificationPlan, reference) -> ResampleResult:
    """Subsample each stratum to the pooled reference-ISUP distribution.

    For stratum ``s`` the largest feasible size is
    ``m_s = min_g floor(count[s, g] / p_g)`` over grades with ``p_g > 0``;
    about ``m_s * p_g`` records of grade ``g`` are then drawn without
    replacement, with the per-grade counts apportioned by largest remainder so
    they add up to ``m_s``. A stratum missing a target grade gets ``m_s = 0``
    and is flagged.
    """
    records = _usable(records, reference)
    target = plan.target_distribution
    by_stratum = assign_strata(records, plan)
    kept_ids = set()
    feasible, keeps, counts, flagged, audit = {}, {}, {}, [], []
    for si, s in enumerate(plan.strata):
        members = by_stratum[s.label]
        by_grade = {}
        for r in members:
            by_grade.setdefault(isup_from_gleason(r.grade(reference)), []).append(r)
        cnt = {g: len(by_grade.get(g, [])) for g in ISUP_GRADES}
        counts[s.label] = cnt
        m = min(math.floor(Fraction(cnt[g]) / p) for g, p in target.items())
        if m == 0:
            flagged.append(s.label)
        feasible[s.label] = m
        per = apportion(m, target)  # ceil(m * p_g) <= count since m * p_g <= count
        keeps[s.label] = per
        for g, pool in sorted(by_grade.items()):
            pool = sorted(pool, key=lambda r: r.core_id)
            take = per.get(g, 0)
            rng = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(si, g)))
            chosen = {pool[i].core_id for i in rng.choice(len(pool), size=take, replace=False)} if take else set()
            kept_ids |= chosen
            for r in pool:
                audit.append({"core_id": r.core_id, "stratum": s.label, "isup": g,
                              "kept": r.core_id in chosen})
    kept = [r for r in records if r.core_id in kept_ids]
    audit.sort(key=lambda a: (a["stratum"], a["core_id"]))
    return ResampleResult(kept, feasible, keeps, counts, flagged, audit)


# ---------------------------------------------------------------- metric batteries

def _kappa(weighting):
    def f(ref, pred, *_):
        return M.weighted_kappa(ref, pred, weighting)
    return f


def _cindex(ref, pred, *_):
    return M.ordinal_c_index(ref, pred)


def _grading_columns(records, reference, rater=AI):
    rows = [r for r in records if r.grade(reference) is not None and r.grade(rater) is not None]
    ref_gs = [r.grade(reference) for r in rows]
    pred_gs = [r.grade(rater) for r in rows]
    return rows, (
        np.array([isup_from_gleason(g) for g in ref_gs], dtype=np.int64),
        np.array([isup_from_gleason(g) for g in pred_gs], dtype=np.int64),
        np.array([_LADDER[g] for g in ref_gs], dtype=np.int64),
        np.array([_LADDER[g] for g in pred_gs], dtype=np.int64),
    )


def _on_isup(fn):
    return lambda ri, pi, rg, pg, *rest: fn(ri, pi)


def _on_gs(fn):
    return lambda ri, pi, rg, pg, *rest: fn(rg, pg)


GRADING_METRICS = {
    "isup_lwk": _on_isup(_kappa("linear")),
    "isup_qwk": _on_isup(_kappa("quadratic")),
    "isup_cindex": _on_isup(_cindex),
    "gs_lwk": _on_gs(_kappa("linear")),
    "gs_qwk": _on_gs(_kappa("quadratic")),
    "gs_cindex": _on_gs(_cindex),
}


def _sens(ri, pi, *_):
    return M.sensitivity(ri > 0, pi > 0)


def _spec(ri, pi, *_):
    return M.specificity(ri > 0, pi > 0)


def _auc(ri, pi, rg, pg, prob):
    return M.auroc(ri > 0, prob)


def _brier(ri, pi, rg, pg, prob):
    return M.brier((ri > 0).astype(float), prob)


DETECTION_METRICS = {"sensitivity": _sens, "specificity": _spec}
PROBABILITY_METRICS = {"auroc": _auc, "brier": _brier}


def evaluate_group(records, reference, scope="all", label="all", n_boot=N_BOOT, seed=0):
    """Metric rows (with bootstrap CIs) and the ISUP confusion matrix for one group."""
    if scope not in ("all", "malignant"):
        raise ValidationError(f"unknown scope {scope!r}")
    rows, cols = _grading_columns(records, reference)
    if scope == "malignant":
        keep = cols[0] > 0
        rows = [r for r, k in zip(rows, keep) if k]
        cols = tuple(c[keep] for c in cols)
    metrics = dict(GRADING_METRICS)
    data = cols
    if scope == "all":
        metrics.update(DETECTION_METRICS)
        if rows and all(r.ai_cancer_prob is not None for r in rows):
            metrics.update(PROBABILITY_METRICS)
            data = cols + (np.array([r.ai_cancer_prob for r in rows], dtype=np.float64),)
    confusion = M.ConfusionMatrix(ISUP_GRADES, np.zeros((6, 6), dtype=np.int64))
    if not rows:
        ests = {name: None for name in metrics}
    else:
        confusion = M.confusion_matrix(cols[0].tolist(), cols[1].tolist(), ISUP_GRADES)
        ests = bootstrap_many(metrics, data, n_boot, derive_seed(seed, "bootstrap", scope, label))
    out = []
    for name in metrics:
        e = ests[name]
        if e is None:
            out.append({"group": label, "scope": scope, "metric": name, "value": math.nan,
                        "ci_lower": math.nan, "ci_upper": math.nan, "n": 0,
                        "n_undefined": n_boot, "unstable": True, "note": "undefined: empty group"})
        else:
            out.append({"group": label, "scope": scope, "metric": name, "value": e.value,
                        "ci_lower": e.ci_lower, "ci_upper": e.ci_upper, "n": e.n,
                        "n_undefined": e.n_undefined, "unstable": e.unstable, "note": e.note})
    return out, confusion


def _group_key(group_key, plan):
    if callable(group_key):
        return group_key
    if group_key == "region":
        return lambda r: r.region
    if group_key == "dataset":
        return lambda r: r.dataset
    if group_key == "stratum":
        if plan is None:
            raise ValidationError("stratum grouping needs a StratificationPlan")
        return lambda r: plan.stratum_of(r.collection_date) if r.collection_date else None
    raise ValidationError(f"unknown group key {group_key!r}")


def subgroup_evaluate(records, group_key, reference, scopes=("all", "malignant"),
                      n_boot=N_BOOT, seed=0, plan=None):
    """Per-group metric table; returns ``(rows, {group: ConfusionMatrix})``.

    Groups are ordered by first appearance in ``records``.
    """
    key = _group_key(group_key, plan)
    groups = {}
    for r in records:
        g = key(r)
        if g is not None:
            groups.setdefault(str(g), []).append(r)
    rows, confusions = [], {}
    for label, members in groups.items():
        for scope in scopes:
            part, cm = evaluate_group(members, reference, scope, label, n_boot, seed)
            rows.extend(part)
            if scope == "all":
                confusions[label] = cm
    return rows, confusions


# ---------------------------------------------------------------- inter-observer

PAIR_METRICS = ("isup_lwk", "isup_qwk", "isup_cindex", "gs_lwk", "gs_qwk", "gs_cindex")


def interobserver_matrix(records, observers, ai_name=AI, n_boot=N_BOOT, seed=0):
    """Pairwise agreement between all observers plus per-observer averages.

    Pathologists are averaged against the other pathologists; the AI against
    all pathologists. Pairs involving the AI use the pathologist as reference.
    Returns ``{"pairs": [...], "summary": [...]}``; summary rows are ranked
    by ISUP QWK average, best first.
    """
    observers = list(observers)
    if len(observers) < 3:
        raise ValidationError("inter-observer analysis needs at least 3 observers")
    humans = [o for o in observers if o != ai_name]
    for r in records:
        for o in observers:
            if r.grade(o) is None:
                raise ValidationError(f"core {r.core_id}: missing grade for observer {o!r}")
    isup = {o: np.array([isup_from_gleason(r.grade(o)) for r in records]) for o in observers}
    ladder = {o: np.array([_LADDER[r.grade(o)] for r in records]) for o in observers}
    ordered = humans + ([ai_name] if ai_name in observers else [])
    pairs = list(combinations(ordered, 2))  # AI always second, i.e. the rater

    col_index = {}
    data = []
    for o in ordered:
        col_index[o] = len(data)
        data.extend([isup[o], ladder[o]])

    def pair_fn(a, b, metric):
        ia, ib = col_index[a], col_index[b]
        fn = GRADING_METRICS[metric]
        return lambda *cols: fn(cols[ia], cols[ib], cols[ia + 1], cols[ib + 1])

    def partners(o):
        if o == ai_name:
            return humans
        return [h for h in humans if h != o]

    def summary_fn(o, metric):
        fns = []
        for other in partners(o):
            a, b = (other, o) if o == ai_name else tuple(x for x in ordered if x in (o, other))
            fns.append(pair_fn(a, b, metric))
        return lambda *cols: sum(f(*cols) for f in fns) / len(fns)

    metrics = {}
    for a, b in pairs:
        for m in PAIR_METRICS:
            metrics[("pair", a, b, m)] = pair_fn(a, b, m)
    for o in ordered:
        for m in PAIR_METRICS:
            metrics[("summary", o, m)] = summary_fn(o, m)
    ests = bootstrap_many(metrics, tuple(data), n_boot, derive_seed(seed, "bootstrap", "interobserver"))

    def row(e):
        return {"value": e.value, "ci_lower": e.ci_lower, "ci_upper": e.ci_upper, "n": e.n}

    pair_rows = []
    for a, b in pairs:
        for m in PAIR_METRICS:
            pair_rows.append({"observer_a": a, "observer_b": b, "metric": m, **row(ests[("pair", a, b, m)])})
    summary_rows = []
    for o in ordered:
        for m in PAIR_METRICS:
            summary_rows.append({"observer": o, "kind": "ai" if o == ai_name else "pathologist",
                                 "partners": ";".join(partners(o)), "metric": m,
                                 **row(ests[("summary", o, m)])})
    score = {o: ests[("summary", o, "isup_qwk")].value for o in ordered}
    rank = sorted(ordered, key=lambda o: (-score[o], ordered.index(o)))
    summary_rows.sort(key=lambda r: (rank.index(r["observer"]), PAIR_METRICS.index(r["metric"])))
    return {"pairs": pair_rows, "summary": summary_rows, "ranking": rank}


# ---------------------------------------------------------------- detection curves

def detection_curves(records, reference, n_bins=10):
    """ROC vertices and calibration output for records carrying an AI probability."""
    rows = [r for r in records if r.grade(reference) is not None and r.ai_cancer_prob is not None]
    y = np.array([isup_from_gleason(r.grade(reference)) > 0 for r in rows])
    p = np.array([r.ai_cancer_prob for r in rows], dtype=np.float64)
    out = {"roc": None, "calibration": None}
    try:
        out["roc"] = M.roc_points(y, p)
    except UndefinedMetricError:
        pass
    if len(rows) >= 2:
        out["calibration"] = M.calibration_curve(y.astype(float), p, n_bins)
    return out
