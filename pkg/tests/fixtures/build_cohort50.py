"""Regenerate the 50-core fixture and freeze its oracle values.

Inputs are drawn with the package's synthetic generator; every expected
output is then recomputed from the written CSV files using only
``tests/oracles.py``. Run from the repository root:

    python3 tests/fixtures/build_cohort50.py
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
import statistics
import sys
from fractions import Fraction
from itertools import combinations
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles as O  # noqa: E402

OUT = HERE / "cohort50"
SYNTH_SEED = 34
RUN_SEED = 2024
N_BOOT = 1000
TEMPORAL_K = 2

LADDER = ["0+0", "3+3", "3+4", "4+3", "4+4", "3+5", "5+3", "4+5", "5+4", "5+5"]
ISUP = {"0+0": 0, "3+3": 1, "3+4": 2, "4+3": 3, "4+4": 4, "3+5": 4, "5+3": 4,
        "4+5": 5, "5+4": 5, "5+5": 5}
GRADING = ["isup_lwk", "isup_qwk", "isup_cindex", "gs_lwk", "gs_qwk", "gs_cindex"]
DETECTION = ["sensitivity", "specificity", "auroc", "brier"]


def build_inputs():
    from gleasonkit.synth import SynthSpec, generate_synthetic_cohort, kernel_with_kappa, write_synthetic_cohort
    # flatter than the clinical mix so both temporal strata hold every grade
    mix = (0.3, 0.2, 0.15, 0.15, 0.1, 0.1)
    spec = SynthSpec(n_cores=50, seed=SYNTH_SEED, cores_per_patient=1, mixture=mix,
                     regions={"North": 25, "South": 25},
                     kernel=kernel_with_kappa(mix, 0.7).tolist(),
                     observer_kernels={"obs2": kernel_with_kappa(mix, 0.8).tolist(),
                                       "obs3": kernel_with_kappa(mix, 0.6).tolist()})
    write_synthetic_cohort(generate_synthetic_cohort(spec), OUT)
    (OUT / "truth.json").unlink()  # latent draws are not needed by the tests
    config = {
        "manifest": "manifest.csv",
        "survival": "survival.csv",
        "seed": RUN_SEED,
        "reference_observer": "ref",
        "temporal_k": TEMPORAL_K,
        "interobserver": True,
        "subgroups": ["region", "dataset"],
        "n_boot": N_BOOT,
    }
    (OUT / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- oracle side

def load_rows():
    with open(OUT / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["date"] = dt.date.fromisoformat(r["collection_date"])
        r["prob"] = float(r["ai_cancer_prob"])
    return rows


def metric_value(name, sample):
    ri = [ISUP[r["grade_ref"]] for r in sample]
    pi = [ISUP[r["ai_gleason"]] for r in sample]
    rg = [LADDER.index(r["grade_ref"]) for r in sample]
    pg = [LADDER.index(r["ai_gleason"]) for r in sample]
    if name == "isup_lwk":
        return O.kappa_brute(ri, pi, "linear", 6)
    if name == "isup_qwk":
        return O.kappa_brute(ri, pi, "quadratic", 6)
    if name == "isup_cindex":
        return O.cindex_pairs(ri, pi)
    if name == "gs_lwk":
        return O.kappa_brute(rg, pg, "linear", 10)
    if name == "gs_qwk":
        return O.kappa_brute(rg, pg, "quadratic", 10)
    if name == "gs_cindex":
        return O.cindex_pairs(rg, pg)
    yr = [v > 0 for v in ri]
    yp = [v > 0 for v in pi]
    if name == "sensitivity":
        return O.sens_exact(yr, yp)
    if name == "specificity":
        return O.spec_exact(yr, yp)
    if name == "auroc":
        return O.auroc_pairs(yr, [r["prob"] for r in sample])
    if name == "brier":
        return O.brier_exact(yr, [r["prob"] for r in sample])
    raise KeyError(name)


def bootstrap(fns, n, seed):
    """fns: name -> callable(index list) returning float or None."""
    points = {k: f(list(range(n))) for k, f in fns.items()}
    reps = {k: [] for k in fns}
    undefined = dict.fromkeys(fns, 0)
    live = [k for k in fns if points[k] is not None]
    for idx in O.replicate_indices(n, N_BOOT, seed):
        idx = idx.tolist()
        for k in live:
            v = fns[k](idx)
            if v is None:
                undefined[k] += 1
            else:
                reps[k].append(v)
    out = {}
    for k in fns:
        if points[k] is None:
            out[k] = {"value": None, "ci_lower": None, "ci_upper": None, "n": n, "n_undefined": N_BOOT}
            continue
        lo, hi = np.percentile(np.asarray(reps[k]), [2.5, 97.5]) if reps[k] else (math.nan, math.nan)
        out[k] = {"value": points[k], "ci_lower": float(lo), "ci_upper": float(hi), "n": n,
                  "n_undefined": undefined[k]}
    return out


def evaluate(sample, scope, label, seed):
    if scope == "malignant":
        sample = [r for r in sample if ISUP[r["grade_ref"]] > 0]
    names = GRADING + (DETECTION if scope == "all" else [])
    if not sample:
        return []

    def make(name):
        def f(idx):
            v = metric_value(name, [sample[i] for i in idx])
            return None if v is None else float(v)
        return f

    res = bootstrap({k: make(k) for k in names}, len(sample),
                    O.derive_seed(seed, "bootstrap", scope, label))
    return [{"group": label, "scope": scope, "metric": k, **res[k]} for k in names]


def subgroups(rows, key, seed):
    groups = {}
    for r in rows:
        groups.setdefault(key(r), []).append(r)
    out = []
    for label, members in groups.items():
        for scope in ("all", "malignant"):
            out += evaluate(members, scope, label, seed)
    return out


def temporal(rows, seed):
    first = min(r["date"] for r in rows)
    last = max(r["date"] for r in rows)
    span = (last - first).days
    edges = [Fraction(span * i, TEMPORAL_K) for i in range(TEMPORAL_K + 1)]
    labels = []
    for i in range(TEMPORAL_K):
        a = first + dt.timedelta(days=math.floor(edges[i]))
        b = first + dt.timedelta(days=math.floor(edges[i + 1]))
        labels.append(f"{a.isoformat()} ~ {b.isoformat()}")

    def stratum(d):
        off = (d - first).days
        for i in range(TEMPORAL_K):
            if edges[i] <= off < edges[i + 1] or (i == TEMPORAL_K - 1 and off == edges[-1]):
                return i
        raise AssertionError

    n = len(rows)
    counts = {}
    for r in rows:
        g = ISUP[r["grade_ref"]]
        counts[g] = counts.get(g, 0) + 1
    target = {g: Fraction(c, n) for g, c in sorted(counts.items())}
    plan_seed = O.derive_seed(seed, "resample")
    kept_ids = set()
    audit = []
    for si in range(TEMPORAL_K):
        members = [r for r in rows if stratum(r["date"]) == si]
        by_g = {}
        for r in members:
            by_g.setdefault(ISUP[r["grade_ref"]], []).append(r)
        m = min(len(by_g.get(g, [])) * p.denominator // p.numerator for g, p in target.items())
        quota = {g: m * p for g, p in target.items()}
        keep = {g: math.floor(q) for g, q in quota.items()}
        spare = m - sum(keep.values())
        for g in sorted(quota, key=lambda g: (-(quota[g] - keep[g]), g))[:spare]:
            keep[g] += 1
        for g, pool in sorted(by_g.items()):
            pool = sorted(pool, key=lambda r: r["core_id"])
            take = keep.get(g, 0)
            chosen = set()
            if take:
                rng = np.random.default_rng(np.random.SeedSequence(plan_seed, spawn_key=(si, g)))
                chosen = {pool[i]["core_id"] for i in rng.choice(len(pool), size=take, replace=False)}
            kept_ids |= chosen
            audit += [{"core_id": r["core_id"], "stratum": labels[si], "isup": g,
                       "kept": r["core_id"] in chosen} for r in pool]
    kept = [r for r in rows if r["core_id"] in kept_ids]
    metrics = subgroups(kept, lambda r: labels[stratum(r["date"])], seed)
    audit.sort(key=lambda a: (a["stratum"], a["core_id"]))
    return metrics, audit


def interobserver(rows, seed):
    humans = ["ref", "obs2", "obs3"]
    ordered = humans + ["ai"]
    col = {"ref": "grade_ref", "obs2": "grade_obs2", "obs3": "grade_obs3", "ai": "ai_gleason"}
    pairs = list(combinations(ordered, 2))

    def pair_metric(a, b, metric, idx):
        sa = [rows[i][col[a]] for i in idx]
        sb = [rows[i][col[b]] for i in idx]
        if metric.startswith("isup"):
            x, y, k = [ISUP[v] for v in sa], [ISUP[v] for v in sb], 6
        else:
            x, y, k = [LADDER.index(v) for v in sa], [LADDER.index(v) for v in sb], 10
        kind = metric.split("_")[1]
        v = O.cindex_pairs(x, y) if kind == "cindex" else O.kappa_brute(x, y, {"lwk": "linear", "qwk": "quadratic"}[kind], k)
        return None if v is None else float(v)

    def partners(o):
        return humans if o == "ai" else [h for h in humans if h != o]

    fns = {}
    for a, b in pairs:
        for m in GRADING:
            fns[("pair", a, b, m)] = (lambda a, b, m: lambda idx: pair_metric(a, b, m, idx))(a, b, m)
    for o in ordered:
        for m in GRADING:
            def summ(idx, o=o, m=m):
                vals = []
                for other in partners(o):
                    a, b = (other, o) if o == "ai" else tuple(x for x in ordered if x in (o, other))
                    v = pair_metric(a, b, m, idx)
                    if v is None:
                        return None
                    vals.append(v)
                return sum(vals) / len(vals)
            fns[("summary", o, m)] = summ
    res = bootstrap(fns, len(rows), O.derive_seed(seed, "bootstrap", "interobserver"))
    keep = ("value", "ci_lower", "ci_upper", "n")
    pair_rows = [{"observer_a": a, "observer_b": b, "metric": m,
                  **{k: res[("pair", a, b, m)][k] for k in keep}} for a, b in pairs for m in GRADING]
    summary = [{"observer": o, "metric": m, **{k: res[("summary", o, m)][k] for k in keep}}
               for o in ordered for m in GRADING]
    score = {o: res[("summary", o, "isup_qwk")]["value"] for o in ordered}
    ranking = sorted(ordered, key=lambda o: (-score[o], ordered.index(o)))
    return pair_rows, summary, ranking


def hazard(reference="1"):
    with open(OUT / "survival.csv", newline="") as fh:
        recs = list(csv.DictReader(fh))
    for r in recs:
        r["time"] = float(r["time_years"])
        r["event"] = int(r["event"])
    groups = sorted({r["group"] for r in recs}, key=float)
    others = [g for g in groups if g != reference]
    recs.sort(key=lambda r: r["time"])
    covs = [[1.0 if r["group"] == g else 0.0 for g in others] for r in recs]
    beta, se = O.cox_oracle([r["time"] for r in recs], [r["event"] for r in recs], covs)
    rows = []
    for g in groups:
        members = [r for r in recs if r["group"] == g]
        row = {"group": g, "n": len(members), "events": sum(r["event"] for r in members),
               "median_fu": statistics.median(r["time"] for r in members), "caution": len(members) < 5}
        if g == reference:
            row.update(hr="Reference")
        else:
            j = others.index(g)
            z = abs(beta[j] / se[j])
            row.update(hr=math.exp(beta[j]), ci_lower=math.exp(beta[j] - 1.96 * se[j]),
                       ci_upper=math.exp(beta[j] + 1.96 * se[j]), p_value=math.erfc(z / math.sqrt(2.0)))
        rows.append(row)
    return rows


def calibration(rows, n_bins=10):
    y = [ISUP[r["grade_ref"]] > 0 for r in rows]
    p = [min(max(r["prob"], 1e-6), 1 - 1e-6) for r in rows]
    order = sorted(range(len(p)), key=lambda i: p[i])
    n = len(p)
    k = min(n_bins, n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    bins, at = [], 0
    for size in sizes:
        idx = order[at:at + size]
        at += size
        bins.append({"mean_predicted": float(sum(Fraction(p[i]) for i in idx) / size),
                     "observed": float(Fraction(sum(y[i] for i in idx), size)), "n": size})
    x = [math.log(v / (1 - v)) for v in p]
    a, b = O.logistic_oracle(x, [float(v) for v in y])
    return bins, {"intercept": a, "slope": b}


def roc(rows):
    y = [ISUP[r["grade_ref"]] > 0 for r in rows]
    s = [r["prob"] for r in rows]
    P, N = sum(y), len(y) - sum(y)
    pts = [{"fpr": 0.0, "tpr": 0.0, "threshold": math.inf}]
    for t in sorted(set(s), reverse=True):
        fp = sum(1 for yi, si in zip(y, s) if si >= t and not yi)
        tp = sum(1 for yi, si in zip(y, s) if si >= t and yi)
        pts.append({"fpr": float(Fraction(fp, N)), "tpr": float(Fraction(tp, P)), "threshold": t})
    return pts


def confusion(rows):
    m = [[0] * 6 for _ in range(6)]
    for r in rows:
        m[ISUP[r["grade_ref"]]][ISUP[r["ai_gleason"]]] += 1
    return m


def _floatify(obj):
    if isinstance(obj, Fraction):
        return float(obj)
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {k: _floatify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_floatify(v) for v in obj]
    return obj


def freeze():
    rows = load_rows()
    overall = evaluate(rows, "all", "all", RUN_SEED) + evaluate(rows, "malignant", "all", RUN_SEED)
    tmp, audit = temporal(rows, RUN_SEED)
    pairs, summary, ranking = interobserver(rows, RUN_SEED)
    bins, recal = calibration(rows)
    oracle = {
        "metrics_overall": overall,
        "metrics_subgroup_region": subgroups(rows, lambda r: r["region"], RUN_SEED),
        "metrics_subgroup_dataset": subgroups(rows, lambda r: r["dataset"], RUN_SEED),
        "metrics_temporal": tmp,
        "stratification_audit": audit,
        "interobserver_pairs": pairs,
        "interobserver_summary": summary,
        "interobserver_ranking": ranking,
        "hazard_table": hazard(),
        "calibration_points": bins,
        "recalibration": recal,
        "roc_points": roc(rows),
        "confusion_isup": confusion(rows),
    }
    (OUT / "oracle.json").write_text(json.dumps(_floatify(oracle), indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    if "--oracle-only" not in sys.argv:
        build_inputs()
    freeze()
