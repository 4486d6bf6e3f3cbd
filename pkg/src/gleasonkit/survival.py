"""Cox proportional-hazards regression on a single categorical grade variable."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConvergenceError, UndefinedMetricError, ValidationError

GRAD_TOL = 1e-8
LOGLIK_TOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 30
Z95 = 1.96
MONOTONE_BETA = 10.0
SMALL_GROUP_N = 5


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: bool
    group: str

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValidationError(f"patient {self.patient_id}: follow-up time must be > 0")
        object.__setattr__(self, "group", str(self.group))
        object.__setattr__(self, "event", bool(self.event))


def _natural_key(label):
    try:
        return (0, float(label), "")
    except ValueError:
        return (1, 0.0, label)


def group_categories(records, categories=None):
    present = {r.group for r in records}
    if categories is None:
        return sorted(present, key=_natural_key)
    categories = [str(c) for c in categories]
    unknown = present - set(categories)
    if unknown:
        raise ValidationError(f"group {sorted(unknown)[0]!r} not among declared categories")
    return categories


def design(records, reference, categories=None):
    """Sorted (time, event, X) with one-hot columns for the non-reference groups."""
    cats = group_categories(records, categories)
    reference = str(reference)
    if reference not in cats:
        raise ValidationError(f"reference group {reference!r} not present")
    others = [c for c in cats if c != reference]
    col = {c: i for i, c in enumerate(others)}
    order = sorted(range(len(records)), key=lambda i: records[i].time)
    time = np.array([records[i].time for i in order], dtype=np.float64)
    event = np.array([int(records[i].event) for i in order], dtype=np.int64)
    X = np.zeros((len(records), len(others)))
    for row, i in enumerate(order):
        g = records[i].group
        if g != reference:
            X[row, col[g]] = 1.0
    return time, event, X, others


def partial_loglik_arrays(beta, time, event, X, ties="efron"):
    """Value, gradient and hessian for pre-sorted arrays (time ascending)."""
    if ties not in ("efron", "breslow"):
        raise ValidationError(f"ties must be 'efron' or 'breslow', got {ties!r}")
    if int(np.sum(event)) == 0:
        raise UndefinedMetricError("partial likelihood needs at least one event")
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    eta = X @ beta if X.shape[1] else np.zeros(len(time))
    return _kernels.cox_accumulate(time, event, X, eta, ties == "efron")


def partial_loglik(beta, records, reference, ties="efron", categories=None):
    time, event, X, _ = design(records, reference, categories)
    return partial_loglik_arrays(beta, time, event, X, ties)


@dataclass
class CoxFit:
    groups: list
    reference: str
    coefficients: np.ndarray
    covariance: np.ndarray
    log_partial_likelihood: float
    iterations: int
    converged: bool
    ties: str = "efron"
    diagnostic: str = ""
    trace: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))

    @property
    def hazard_ratios(self):
        return np.exp(self.coefficients)

    @property
    def ci(self):
        se = self.se
        return np.exp(self.coefficients - Z95 * se), np.exp(self.coefficients + Z95 * se)

    @property
    def p_values(self):
        z = np.abs(self.coefficients / self.se)
        return np.array([math.erfc(v / math.sqrt(2.0)) for v in z])

    def hr(self, group):
        """Hazard ratio of ``group`` against the reference (1.0 for the reference itself)."""
        group = str(group)
        if group == self.reference:
            return 1.0
        return float(self.hazard_ratios[self.groups.index(group)])


def cox_fit(records, reference_group, ties="efron", categories=None) -> CoxFit:
    """Newton-Raphson with step halving, started at beta = 0."""
    records = list(records)
    time, event, X, others = design(records, reference_group, categories)
    if int(event.sum()) == 0:
        raise UndefinedMetricError("Cox fit needs at least one event")
    for j, g in enumerate(others):
        if not X[:, j].any():
            raise ValidationError(f"group {g!r} has no subjects")

    p = X.shape[1]
    beta = np.zeros(p)
    ll, grad, hess = partial_loglik_arrays(beta, time, event, X, ties)
    trace = [ll]
    converged = p == 0 or np.max(np.abs(grad)) < GRAD_TOL
    it = 0
    while not converged and it < MAX_ITER:
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            cand = beta + scale * step
            ll_new, g_new, h_new = partial_loglik_arrays(cand, time, event, X, ties)
            if ll_new >= ll:
                break
            scale *= 0.5
        else:
            break
        delta = ll_new - ll
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        trace.append(ll)
        if np.max(np.abs(grad)) < GRAD_TOL or abs(delta) < LOGLIK_TOL:
            converged = True

    diagnostic = ""
    dead_by_group = [int(event[X[:, j] > 0].sum()) for j in range(p)]
    ref_events = int(event[X.sum(axis=1) == 0].sum())
    flagged = [g for g, d in zip(others, dead_by_group) if d == 0]
    if ref_events == 0:
        flagged.append(str(reference_group))
    if flagged:
        converged = False
        diagnostic = f"monotone likelihood: no events in group(s) {', '.join(flagged)}"
    elif p and np.max(np.abs(beta)) > MONOTONE_BETA:
        converged = False
        worst = others[int(np.argmax(np.abs(beta)))]
        diagnostic = f"monotone likelihood suspected: |beta| > {MONOTONE_BETA} for group {worst}"
    elif not converged:
        diagnostic = f"no convergence after {it} iterations"

    try:
        cov = np.linalg.inv(-hess) if p else np.zeros((0, 0))
    except np.linalg.LinAlgError:
        cov = np.full((p, p), np.nan)
        converged = False
        diagnostic = diagnostic or "singular information matrix"
    cov = (cov + cov.T) / 2.0
    return CoxFit(others, str(reference_group), beta, cov, float(ll), it, bool(converged),
                  ties, diagnostic, trace)


def _format_p(p):
    return f"{p:.3g}"


def hazard_table(fit: CoxFit, records, categories=None):
    """Report rows: group, n, events, median follow-up, HR, 95% CI, p-value."""
    if not fit.converged:
        raise ConvergenceError(fit.diagnostic or "Cox fit did not converge")
    records = list(records)
    cats = group_categories(records, categories)
    lo, hi = fit.ci
    pv = fit.p_values
    rows = []
    for g in cats:
        members = [r for r in records if r.group == g]
        row = {
            "group": g,
            "n": len(members),
            "events": sum(r.event for r in members),
            "median_fu": float(np.median([r.time for r in members])) if members else math.nan,
            "caution": len(members) < SMALL_GROUP_N,
        }
        if g == fit.reference:
            row.update(hr="Reference", ci_lower="", ci_upper="", p_value="")
        else:
            j = fit.groups.index(g)
            row.update(hr=float(fit.hazard_ratios[j]), ci_lower=float(lo[j]),
                       ci_upper=float(hi[j]), p_value=float(pv[j]))
        rows.append(row)
    return rows


def load_survival_csv(path):
    """Read ``patient_id,time_years,event,group`` rows."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "time_years", "event", "group"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing column(s) {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ev = int(row["event"])
                if ev not in (0, 1):
                    raise ValueError
                records.append(SurvivalRecord(row["patient_id"], float(row["time_years"]), bool(ev), row["group"]))
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: bad time/event value") from None
    return records


def write_survival_csv(records, path):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time_years", "event", "group"])
        for r in records:
            w.writerow([r.patient_id, format(r.time, ".17g"), int(r.event), r.group])
