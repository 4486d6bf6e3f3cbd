"""End-to-end run: tiling QC, ensemble inference, evaluation and reports."""
from __future__ import annotations

import hashlib
import json
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analytics, report
from ._kernels import BACKEND
from .abmil import load_weights
from .bootstrap import derive_seed
from .cohort import AI, load_manifest, observers_of
from .ensemble import N_MODELS, ensemble_infer
from .errors import ConvergenceError, GleasonKitError, StageError, ValidationError
from .formats import read_bundle
from .geometry import TissueMask, assign_patches_to_cores, detect_empty_cores, load_annotations, \
    plan_classification_patches
from .survival import cox_fit, hazard_table, load_survival_csv

log = logging.getLogger(__name__)

_PATH_FIELDS = ("manifest", "annotations", "bundles", "survival")


@dataclass
class PipelineConfig:
    manifest: str
    seed: int
    out: str = "report"
    annotations: str | None = None
    bundles: str | None = None
    weights: list = field(default_factory=list)
    base_resolution: float = 1.0
    reference_observer: str | None = None
    detection: bool = True
    grading: bool = True
    subgroups: list = field(default_factory=lambda: ["region", "dataset"])
    temporal_k: int = 0
    interobserver: bool = False
    survival: str | None = None
    survival_reference: str = "1"
    n_boot: int = 1000
    calibration_bins: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.seed is None:
            raise ValidationError("config: seed is mandatory")
        self.seed = int(self.seed)
        if self.weights and len(self.weights) != N_MODELS:
            raise ValidationError(f"config: inference needs exactly {N_MODELS} weight paths, got {len(self.weights)}")
        if self.weights and not self.bundles:
            raise ValidationError("config: inference needs a bundles directory")

    @classmethod
    def from_file(cls, path, **overrides):
        """Load a JSON config; relative paths resolve against the config's directory."""
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except ValueError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        d.update({k: v for k, v in overrides.items() if v is not None})
        base = path.parent
        for key in _PATH_FIELDS:
            if d.get(key):
                d[key] = str((base / d[key]).resolve()) if not Path(d[key]).is_absolute() else d[key]
        d["weights"] = [str((base / w).resolve()) if not Path(w).is_absolute() else w for w in d.get("weights", [])]
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"{path}: unknown config key {sorted(unknown)[0]!r}")
        if "seed" not in d:
            raise ValidationError(f"{path}: seed is mandatory")
        return cls(**d)

    def fingerprint(self):
        d = asdict(self)
        d.pop("out")
        d.pop("workers")  # does not affect results
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, (GleasonKitError, OSError, ValueError)) \
                and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def annotation_files(ann_dir):
    """Core annotation files of a directory, skipping mask sidecars."""
    return [p for p in sorted(Path(ann_dir).glob("*.json")) if not p.name.endswith(".mask.json")]


def tile_slides(ann_dir, base_resolution=1.0):
    """Patch planning and core assignment for every annotated slide.

    Returns ``(qc, per_slide)`` where ``per_slide[slide_id] = (patches, assignment)``.
    """
    ann_dir = Path(ann_dir)
    files = annotation_files(ann_dir)
    if not files:
        raise ValidationError(f"no annotation files in {ann_dir}")
    all_cores, assignment, per_slide = [], {}, {}
    for ann in files:
        slide_id = ann.stem
        cores = load_annotations(ann)
        mask = TissueMask.load(ann_dir / f"{slide_id}.mask.png")
        patches = plan_classification_patches(mask, base_resolution=base_resolution, slide_id=slide_id)
        part = assign_patches_to_cores(patches, cores, base_resolution)
        dup = set(part) & set(assignment)
        if dup:
            raise ValidationError(f"core {sorted(dup)[0]!r} annotated on more than one slide")
        assignment.update(part)
        all_cores.extend(cores)
        per_slide[slide_id] = (patches, part)
    qc = detect_empty_cores(assignment, all_cores)
    qc["patches_per_core"] = {cid: len(idx) for cid, idx in sorted(assignment.items())}
    return qc, per_slide


def run_pipeline(cfg: PipelineConfig):
    """Execute every enabled stage and write the report directory.

    Returns a dict with the written file paths and the in-memory results.
    Outputs are a pure function of (input bytes, config, seed).
    """
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise StageError("report", f"output directory {out} is not writable ({exc})") from exc
    files = []
    notes = {}
    results = {}

    with _Stage("manifest"):
        records = load_manifest(cfg.manifest)
        observers = observers_of(records)
        reference = cfg.reference_observer or (observers[0] if observers else None)
        if reference is None:
            raise ValidationError("manifest has no observer grade columns")
        if reference not in observers:
            raise ValidationError(f"reference observer {reference!r} not in manifest")

    excluded = set()
    if cfg.annotations:
        with _Stage("tiling"):
            qc, _ = tile_slides(cfg.annotations, cfg.base_resolution)
            excluded = set(qc["empty_core_ids"])
            report.write_json(qc, out / "qc_report.json")
            files.append(out / "qc_report.json")
            results["qc"] = qc
    else:
        notes["tiling"] = "disabled: no annotations directory"
    records = [r for r in records if r.core_id not in excluded]

    if cfg.weights:
        with _Stage("inference"):
            models = [load_weights(w) for w in cfg.weights]
            bdir = Path(cfg.bundles)
            for r in records:
                if not (bdir / f"{r.core_id}.gkb").exists():
                    raise ValidationError(f"no patch bundle for core {r.core_id}")

            def infer_one(r):
                bundle = read_bundle(bdir / f"{r.core_id}.gkb")
                if bundle.n == 0:
                    raise ValidationError(f"bundle for core {r.core_id} is empty")
                return ensemble_infer(bundle.data(), models)

            # map() preserves input order, so the reduction below is deterministic
            with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
                results_v = list(pool.map(infer_one, records))
            verdicts = []
            for r, v in zip(records, results_v):
                r.set_verdict(v)
                verdicts.append(v.to_record(r.core_id))
            path = out / "verdicts.jsonl"
            path.write_text("".join(json.dumps(report._jsonable(v), sort_keys=True) + "\n" for v in verdicts))
            files.append(path)
    else:
        notes["inference"] = "disabled: AI verdicts taken from manifest"

    scored = [r for r in records if r.ai_gleason is not None and r.grade(reference) is not None]
    scopes = ("all", "malignant")

    if cfg.detection or cfg.grading:
        with _Stage("evaluate"):
            rows = []
            for scope in scopes:
                part, cm = analytics.evaluate_group(scored, reference, scope, "all", cfg.n_boot, cfg.seed)
                if scope == "all":
                    report.write_json(cm.to_dict(), out / "confusion_isup.json")
                    files.append(out / "confusion_isup.json")
                rows.extend(part)
            keep = set()
            if cfg.detection:
                keep |= set(analytics.DETECTION_METRICS) | set(analytics.PROBABILITY_METRICS)
            if cfg.grading:
                keep |= set(analytics.GRADING_METRICS)
            rows = [r for r in rows if r["metric"] in keep]
            files += report.write_metric_table(rows, out, "metrics_overall")
            results["overall"] = rows
            if cfg.detection:
                curves = analytics.detection_curves(scored, reference, cfg.calibration_bins)
                if curves["roc"] is not None:
                    files += [p for p in report.write_table(
                        [{"fpr": f, "tpr": t, "threshold": th} for f, t, th in curves["roc"]],
                        out, "roc_points") if p.suffix == ".csv"]
                else:
                    notes["roc_points"] = "absent: single-class reference or no probabilities"
                cal = curves["calibration"]
                if cal is not None:
                    report.write_csv([{"mean_predicted": a, "observed": b, "n": c} for a, b, c in cal.bins],
                                     out / "calibration_points.csv")
                    report.write_json({"recalibration": None if cal.recalibration is None
                                       else asdict(cal.recalibration), "note": cal.note},
                                      out / "calibration.json")
                    files += [out / "calibration_points.csv", out / "calibration.json"]
                    results["calibration"] = cal
    else:
        notes["evaluate"] = "disabled"

    for key in cfg.subgroups or []:
        with _Stage(f"subgroup:{key}"):
            rows, _ = analytics.subgroup_evaluate(scored, key, reference, scopes, cfg.n_boot, cfg.seed)
            files += report.write_metric_table(rows, out, f"metrics_subgroup_{key}")
            results[f"subgroup_{key}"] = rows
    if not cfg.subgroups:
        notes["subgroup"] = "disabled"

    if cfg.temporal_k:
        with _Stage("temporal"):
            plan = analytics.temporal_bins(scored, cfg.temporal_k, reference, derive_seed(cfg.seed, "resample"))
            res = analytics.grade_balanced_resample(scored, plan, reference)
            rows, _ = analytics.subgroup_evaluate(res.records, "stratum", reference, scopes,
                                                  cfg.n_boot, cfg.seed, plan=plan)
            files += report.write_metric_table(rows, out, "metrics_temporal")
            report.write_csv(res.audit, out / "stratification_audit.csv",
                             ["core_id", "stratum", "isup", "kept"])
            report.write_json({
                "strata": [{"label": s.label, "start": s.start.isoformat(), "end": s.end.isoformat(),
                            "feasible_size": res.feasible_size[s.label], "keeps": res.keeps[s.label],
                            "counts": res.counts[s.label]} for s in plan.strata],
                "target_distribution": {str(g): float(p) for g, p in plan.target_distribution.items()},
                "flagged": res.flagged,
            }, out / "stratification_plan.json")
            files += [out / "stratification_audit.csv", out / "stratification_plan.json"]
            results["temporal"] = rows
    else:
        notes["temporal"] = "disabled"

    if cfg.interobserver:
        with _Stage("interobserver"):
            obs = observers + [AI]
            subset = [r for r in records if all(r.grade(o) is not None for o in obs)]
            if not subset:
                raise ValidationError("no cores graded by every observer")
            io = analytics.interobserver_matrix(subset, obs, AI, cfg.n_boot, cfg.seed)
            files += report.write_table(io["pairs"], out, "interobserver_pairs")
            files += report.write_table(io["summary"], out, "interobserver_summary")
            results["interobserver"] = io
    else:
        notes["interobserver"] = "disabled"

    if cfg.survival:
        with _Stage("survival"):
            srecs = load_survival_csv(cfg.survival)
            fit = cox_fit(srecs, cfg.survival_reference)
            if not fit.converged:
                raise ConvergenceError(fit.diagnostic)
            rows = hazard_table(fit, srecs)
            files += report.write_table(rows, out, "hazard_table")
            results["survival"] = rows
    else:
        notes["survival"] = "disabled"

    inputs = {"manifest": _sha256(cfg.manifest)}
    if cfg.survival:
        inputs["survival"] = _sha256(cfg.survival)
    for i, w in enumerate(cfg.weights):
        inputs[f"weights_{i}"] = _sha256(w)
    meta = {
        "seed": cfg.seed,
        "config_sha256": cfg.fingerprint(),
        "inputs_sha256": inputs,
        "reference_observer": reference,
        "n_records": len(records),
        "n_excluded": len(excluded),
        "versions": {"gleasonkit": __version__, "numpy": np.__version__,
                     "python": platform.python_version(), "kernels": BACKEND},
        "absent": notes,
        "files": sorted(p.name for p in files),
    }
    report.write_json(meta, out / "run_metadata.json")
    files.append(out / "run_metadata.json")
    return {"files": files, "results": results, "records": records}
