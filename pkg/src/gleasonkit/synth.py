"""Synthetic cohorts with known ground truth.

Two modes: ``labels`` draws AI grades from a confusion kernel (no model
involved); ``pixels`` additionally writes slide masks, core annotations,
textured patch bundles and ten random model weight files so the full
pipeline can be smoke-tested.
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .bootstrap import derive_seed
from .cohort import CohortRecord, write_manifest
from .errors import DegenerateError, ValidationError
from .grading import GleasonScore
from .survival import SurvivalRecord, write_survival_csv

DEFAULT_MIXTURE = (0.495, 0.2, 0.12, 0.07, 0.06, 0.055)
DEFAULT_GS_WITHIN = {
    4: {"4+4": 0.9, "3+5": 0.05, "5+3": 0.05},
    5: {"4+5": 0.6, "5+4": 0.2, "5+5": 0.2},
}
_GS_OF_ISUP = {0: {"0+0": 1.0}, 1: {"3+3": 1.0}, 2: {"3+4": 1.0}, 3: {"4+3": 1.0}}
DEFAULT_HAZARDS = (0.02, 0.02, 0.03, 0.06, 0.08, 0.12)


def kernel_with_kappa(mixture, kappa):
    """Row-stochastic kernel whose joint with ``mixture`` has weighted kappa ``kappa``.

    ``K = kappa * I + (1 - kappa) * 1 m^T``: both marginals equal ``m`` and the
    observed disagreement is ``(1 - kappa)`` times the chance disagreement,
    for any weighting.
    """
    m = np.asarray(mixture, dtype=np.float64)
    return kappa * np.eye(len(m)) + (1.0 - kappa) * np.tile(m, (len(m), 1))


def analytic_kappa(kernel, mixture, weighting="quadratic"):
    """Expected weighted kappa of the joint ``diag(mixture) @ kernel``."""
    K = np.asarray(kernel, dtype=np.float64)
    m = np.asarray(mixture, dtype=np.float64)
    _check_stochastic(K, m)
    J = m[:, None] * K
    i, j = np.indices(J.shape)
    w = np.abs(i - j) if weighting == "linear" else (i - j) ** 2
    E = np.outer(J.sum(axis=1), J.sum(axis=0))
    denom = float((w * E).sum())
    if denom == 0.0:
        raise DegenerateError("joint distribution is concentrated in a single category")
    return 1.0 - float((w * J).sum()) / denom


def _check_stochastic(K, m):
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] != len(m):
        raise ValidationError("kernel must be square and match the mixture length")
    if np.any(K < 0) or np.any(np.abs(K.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("kernel rows must be probability vectors")
    if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
        raise ValidationError("mixture must be a probability vector")


@dataclass
class SynthSpec:
    n_cores: int = 200
    mixture: tuple = DEFAULT_MIXTURE
    gs_within: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_GS_WITHIN.items()})
    regions: dict | None = None
    datasets: tuple = ("synthA", "synthB")
    date_range: tuple = ("1998-01-13", "2015-11-12")
    kernel: list | None = None
    observer_kernels: dict | None = None
    reference_observer: str = "ref"
    hazards: tuple = DEFAULT_HAZARDS
    censor_rate: float = 0.3
    cores_per_patient: int = 5
    empty_cores: int = 0
    mode: str = "labels"
    seed: int = 0

    def __post_init__(self):
        m = np.asarray(self.mixture, dtype=np.float64)
        if m.shape != (6,):
            raise ValidationError("mixture needs 6 entries (ISUP 0..5)")
        K = np.eye(6) if self.kernel is None else np.asarray(self.kernel, dtype=np.float64)
        _check_stochastic(K, m)
        for g, within in self.gs_within.items():
            if abs(sum(within.values()) - 1.0) > 1e-9:
                raise ValidationError(f"Gleason mixture within ISUP {g} must sum to 1")
            for s in within:
                if GleasonScore.parse(s).isup != int(g):
                    raise ValidationError(f"score {s} does not belong to ISUP {g}")
        if any(h <= 0 for h in self.hazards) or len(self.hazards) != 6:
            raise ValidationError("hazards must be 6 positive rates")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ValidationError("censor_rate must lie in [0, 1)")
        if self.regions is not None and sum(self.regions.values()) != self.n_cores:
            raise ValidationError("region sizes must add up to n_cores")
        if self.mode not in ("labels", "pixels"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.empty_cores and self.mode != "pixels":
            raise ValidationError("empty cores are only meaningful in pixel mode")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "gs_within" in d:
            d["gs_within"] = {int(k): v for k, v in d["gs_within"].items()}
        for key in ("mixture", "hazards", "datasets", "date_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["gs_within"] = {str(k): v for k, v in self.gs_within.items()}
        return d


@dataclass
class SynthCohort:
    records: list
    survival: list
    truth: dict
    slides: dict = field(default_factory=dict)


def _draw_gs(rng, isup, within):
    table = within.get(isup) or _GS_OF_ISUP[isup]
    names = sorted(table)
    k = rng.choice(len(names), p=np.array([table[n] for n in names]))
    return GleasonScore.parse(names[k])


def _censor_rate_for(hazards, target):
    """Exponential censoring rate giving an expected censored share of ``target``."""
    hazards = np.asarray(hazards, dtype=np.float64)
    if target == 0.0:
        return 0.0
    return brentq(lambda lc: np.mean(lc / (lc + hazards)) - target, 1e-12, 1e6, xtol=1e-14)


def exponential_survival(rng, hazards, censor_rate):
    """Event/censoring draw per subject; returns (time, event, censoring rate used)."""
    hazards = np.asarray(hazards, dtype=np.float64)
    lc = _censor_rate_for(hazards, censor_rate)
    t_event = rng.exponential(1.0 / hazards)
    t_cens = rng.exponential(1.0 / lc, size=len(hazards)) if lc > 0 else np.full(len(hazards), np.inf)
    event = t_event <= t_cens
    return np.minimum(t_event, t_cens), event, lc


def generate_synthetic_cohort(spec: SynthSpec) -> SynthCohort:
    m = np.asarray(spec.mixture, dtype=np.float64)
    K = np.eye(6) if spec.kernel is None else np.asarray(spec.kernel, dtype=np.float64)
    obs_kernels = spec.observer_kernels
    if obs_kernels is None:
        obs_kernels = {"obs2": K.tolist(), "obs3": K.tolist()}
    rng = np.random.default_rng(derive_seed(spec.seed, "synth", "labels"))
    n = spec.n_cores

    true_isup = rng.choice(6, size=n, p=m)
    true_gs = [_draw_gs(rng, int(g), spec.gs_within) for g in true_isup]
    ai_isup = np.array([rng.choice(6, p=K[g]) for g in true_isup])
    ai_gs = [_draw_gs(rng, int(g), spec.gs_within) for g in ai_isup]
    obs = {}
    for name in sorted(obs_kernels):
        Ko = np.asarray(obs_kernels[name], dtype=np.float64)
        _check_stochastic(Ko, m)
        iso = [int(rng.choice(6, p=Ko[g])) for g in true_isup]
        obs[name] = [_draw_gs(rng, g, spec.gs_within) for g in iso]
    # malignant calls get high probabilities, benign calls low ones
    probs = np.where(ai_isup > 0, rng.beta(8.0, 1.5, size=n), rng.beta(1.2, 10.0, size=n))

    start = dt.date.fromisoformat(spec.date_range[0])
    end = dt.date.fromisoformat(spec.date_range[1])
    n_pat = -(-n // spec.cores_per_patient)
    pat_days = rng.integers(0, (end - start).days + 1, size=n_pat)
    pat_days[0], pat_days[-1] = 0, (end - start).days  # pin the date range

    if spec.regions is None:
        region_of = ["R1"] * n
    else:
        region_of = [name for name, size in spec.regions.items() for _ in range(size)]

    records = []
    for i in range(n):
        p = i // spec.cores_per_patient
        grades = {spec.reference_observer: true_gs[i]}
        grades.update({name: obs[name][i] for name in obs})
        records.append(CohortRecord(
            core_id=f"C{i:05d}", patient_id=f"P{p:04d}", region=region_of[i],
            dataset=spec.datasets[p % len(spec.datasets)],
            collection_date=start + dt.timedelta(days=int(pat_days[p])),
            observer_grades=grades,
            ai_gleason=ai_gs[i] if spec.mode == "labels" else None,
            ai_cancer_prob=float(probs[i]) if spec.mode == "labels" else None,
            slide_id=f"S{p:04d}",
        ))

    # patient-level survival by worst AI grade
    srng = np.random.default_rng(derive_seed(spec.seed, "synth", "survival"))
    pat_group = np.zeros(n_pat, dtype=int)
    for i in range(n):
        p = i // spec.cores_per_patient
        pat_group[p] = max(pat_group[p], int(ai_isup[i]))
    haz = np.asarray(spec.hazards)[pat_group]
    times, events, lc = exponential_survival(srng, haz, spec.censor_rate)
    survival = [SurvivalRecord(f"P{p:04d}", float(times[p]), bool(events[p]), str(pat_group[p]))
                for p in range(n_pat)]

    truth = {
        "spec": spec.to_dict(),
        "true_isup": true_isup.tolist(),
        "true_gleason": [str(g) for g in true_gs],
        "ai_isup": ai_isup.tolist(),
        "ai_gleason": [str(g) for g in ai_gs],
        "ai_cancer_prob": probs.tolist(),
        "observer_gleason": {k: [str(g) for g in v] for k, v in obs.items()},
        "patient_group": pat_group.tolist(),
        "censoring_rate_per_year": lc,
    }
    cohort = SynthCohort(records, survival, truth)
    if spec.mode == "pixels":
        _add_slides(spec, cohort, true_isup)
    return cohort


# ---------------------------------------------------------------- pixel mode

_CORE_PX = 384  # core edge length in base pixels at 1.0 µm/px
_CORE_GAP = 640


def _texture(rng, isup, size=256):
    """Pink H&E-like noise whose darkness and granularity grow with grade."""
    base = np.array([230, 160, 200], dtype=np.float64) - 18.0 * isup
    cells = rng.random((size // 8, size // 8)) < 0.08 + 0.07 * isup
    cells = np.kron(cells, np.ones((8, 8)))
    img = (base[None, None, :] - 90.0 * cells[..., None]).astype(np.int16)
    img += rng.integers(-10, 11, (size, size, 3), dtype=np.int16)
    return np.clip(img, 0, 255).astype(np.uint8)


def _add_slides(spec, cohort, true_isup):
    from .geometry import (CLS_RESOLUTION, SEG_RESOLUTION, CoreAnnotation, TileGridSpec,
                           TissueMask, assign_patches_to_cores, plan_classification_patches)

    prng = np.random.default_rng(derive_seed(spec.seed, "synth", "pixels"))
    by_slide = {}
    for idx, r in enumerate(cohort.records):
        by_slide.setdefault(r.slide_id, []).append(idx)
    empty_left = spec.empty_cores
    bundles = {}
    slides = {}
    for slide_id, idxs in by_slide.items():
        width = _CORE_GAP * len(idxs) + _CORE_GAP
        height = 2 * _CORE_GAP
        mw, mh = int(width / SEG_RESOLUTION), int(height / SEG_RESOLUTION)
        bits = np.zeros((mh, mw), dtype=bool)
        cores = []
        for k, idx in enumerate(idxs):
            rec = cohort.records[idx]
            x0, y0 = _CORE_GAP * (k + 1) - _CORE_PX // 2, _CORE_GAP - _CORE_PX // 2
            empty = empty_left > 0 and k == len(idxs) - 1
            if empty:
                empty_left -= 1
                y0 = 40.0  # over background near the top edge, no tissue drawn
            else:
                s = int(SEG_RESOLUTION)
                bits[int(y0) // s:(int(y0) + _CORE_PX) // s, int(x0) // s:(int(x0) + _CORE_PX) // s] = True
            if empty:
                poly = ((x0, y0), (x0 + 120, y0), (x0 + 120, y0 + 40), (x0, y0 + 40))
            else:
                poly = ((x0, y0), (x0 + _CORE_PX, y0), (x0 + _CORE_PX, y0 + _CORE_PX), (x0, y0 + _CORE_PX))
            cores.append(CoreAnnotation(rec.core_id, poly, dict(rec.observer_grades)))
        mask = TissueMask(mw, mh, SEG_RESOLUTION, bits)
        patches = plan_classification_patches(mask, TileGridSpec(), CLS_RESOLUTION, slide_id)
        assignment = assign_patches_to_cores(patches, cores, CLS_RESOLUTION)
        for core, idx in zip(cores, idxs):
            hits = assignment[core.core_id]
            if hits:
                coords = np.array([(patches[h].x, patches[h].y) for h in hits], dtype=np.int32)
                pix = np.stack([_texture(prng, int(true_isup[idx])) for _ in hits])
                bundles[core.core_id] = (coords, pix)
        slides[slide_id] = {"mask": mask, "cores": cores}
    cohort.slides = {"slides": slides, "bundles": bundles}


def write_synthetic_cohort(cohort: SynthCohort, out_dir, n_models=10, model_seed=None):
    """Write manifest, survival file, truth sidecar (and pixel-mode assets)."""
    from .abmil import AbmilModel, save_weights
    from .formats import PatchBundle, write_bundle
    from .geometry import save_annotations

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cohort.truth["spec"]
    observers = [spec["reference_observer"]] + sorted(cohort.truth["observer_gleason"])
    write_manifest(cohort.records, out / "manifest.csv", observers)
    write_survival_csv(cohort.survival, out / "survival.csv")
    (out / "truth.json").write_text(json.dumps(cohort.truth, sort_keys=True, indent=1) + "\n")
    paths = {"manifest": out / "manifest.csv", "survival": out / "survival.csv", "truth": out / "truth.json"}
    if cohort.slides:
        ann = out / "annotations"
        bdir = out / "bundles"
        wdir = out / "weights"
        for d in (ann, bdir, wdir):
            d.mkdir(exist_ok=True)
        for slide_id, s in cohort.slides["slides"].items():
            save_annotations(s["cores"], ann / f"{slide_id}.json")
            s["mask"].save(ann / f"{slide_id}.mask.png")
        for core_id, (coords, pix) in sorted(cohort.slides["bundles"].items()):
            write_bundle(PatchBundle(core_id, coords, pixels=pix), bdir / f"{core_id}.gkb")
        seed = spec["seed"] if model_seed is None else model_seed
        weights = []
        for i in range(n_models):
            path = wdir / f"model_{i}.gkw"
            save_weights(AbmilModel.random(derive_seed(seed, "synth", "model", i)), path)
            weights.append(path)
        paths.update(annotations=ann, bundles=bdir, weights=weights)
    return paths
