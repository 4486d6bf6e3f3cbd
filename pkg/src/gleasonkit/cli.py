"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 numerical non-convergence.
Options given on the command line override keys of the ``--config`` JSON.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analytics, report
from .bootstrap import derive_seed
from .cohort import AI, load_manifest, observers_of, write_manifest
from .errors import ConvergenceError, GleasonKitError, StageError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE = 0, 2, 3

log = logging.getLogger("gleasonkit")


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except ValueError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg


def _merge(args, keys):
    """Fill unset options from the config file."""
    cfg = _load_config(args.config)
    for key in keys:
        if getattr(args, key, None) is None and key in cfg:
            setattr(args, key, cfg[key])
    return args


def _need(args, *keys):
    for key in keys:
        if getattr(args, key, None) in (None, ""):
            raise ValidationError(f"missing required option --{key.replace('_', '-')}")


def _out(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _reference(records, name):
    observers = observers_of(records)
    if name is None:
        if not observers:
            raise ValidationError("manifest has no observer grade columns")
        return observers[0]
    if name not in observers:
        raise ValidationError(f"reference observer {name!r} not in manifest")
    return name


# ---------------------------------------------------------------- subcommands

def cmd_tile(args):
    from .pipeline import tile_slides
    _merge(args, ["annotations", "base_resolution"])
    _need(args, "annotations")
    out = _out(args)
    qc, per_slide = tile_slides(args.annotations, float(args.base_resolution or 1.0))
    for slide, (patches, part) in per_slide.items():
        owners = {}
        for cid, idx in part.items():
            for i in idx:
                owners.setdefault(i, []).append(cid)
        rows = [{"slide_id": slide, "x": p.x, "y": p.y, "tissue_fraction": p.tissue_fraction,
                 "cores": ";".join(owners.get(i, []))} for i, p in enumerate(patches)]
        report.write_csv(rows, out / f"patches_{slide}.csv",
                         ["slide_id", "x", "y", "tissue_fraction", "cores"])
    report.write_json(qc, out / "qc_report.json")
    print(f"{qc['n_cores']} cores, {qc['n_empty']} empty ({qc['empty_rate_percent']:.2f}%)")


def cmd_infer(args):
    from .abmil import load_weights
    from .ensemble import ensemble_infer
    from .formats import read_bundle
    _merge(args, ["bundles", "weights", "manifest"])
    _need(args, "bundles", "weights")
    out = _out(args)
    models = [load_weights(w) for w in args.weights]
    bdir = Path(args.bundles)
    records = load_manifest(args.manifest) if args.manifest else None
    ids = [r.core_id for r in records] if records else sorted(p.stem for p in bdir.glob("*.gkb"))
    verdicts = {}
    for cid in ids:
        path = bdir / f"{cid}.gkb"
        if not path.exists():
            log.warning("no bundle for core %s; skipped", cid)
            continue
        verdicts[cid] = ensemble_infer(read_bundle(path).data(), models)
    (out / "verdicts.jsonl").write_text("".join(
        json.dumps(report._jsonable(v.to_record(c)), sort_keys=True) + "\n" for c, v in verdicts.items()))
    if records:
        for r in records:
            if r.core_id in verdicts:
                r.set_verdict(verdicts[r.core_id])
        write_manifest(records, out / "manifest_with_ai.csv")
    print(f"{len(verdicts)} verdicts written")


def _evaluate_common(args):
    _merge(args, ["manifest", "reference", "n_boot"])
    _need(args, "manifest")
    records = load_manifest(args.manifest)
    ref = _reference(records, args.reference)
    scored = [r for r in records if r.ai_gleason is not None and r.grade(ref) is not None]
    if not scored:
        raise ValidationError("no cores carry both a reference grade and an AI grade")
    return records, ref, scored


def cmd_evaluate(args):
    _merge(args, ["group_by"])
    records, ref, scored = _evaluate_common(args)
    out = _out(args)
    n_boot = int(args.n_boot or 1000)
    rows = []
    for scope in ("all", "malignant"):
        part, cm = analytics.evaluate_group(scored, ref, scope, "all", n_boot, args.seed)
        rows += part
        if scope == "all":
            report.write_json(cm.to_dict(), out / "confusion_isup.json")
    report.write_metric_table(rows, out, "metrics_overall")
    for key in args.group_by or []:
        sub, _ = analytics.subgroup_evaluate(scored, key, ref, ("all", "malignant"), n_boot, args.seed)
        report.write_metric_table(sub, out, f"metrics_subgroup_{key}")
    curves = analytics.detection_curves(scored, ref)
    if curves["roc"] is not None:
        report.write_csv([{"fpr": a, "tpr": b, "threshold": c} for a, b, c in curves["roc"]],
                         out / "roc_points.csv")
    if curves["calibration"] is not None:
        report.write_csv([{"mean_predicted": a, "observed": b, "n": c}
                          for a, b, c in curves["calibration"].bins], out / "calibration_points.csv")
    for r in rows:
        if r["scope"] == "all":
            print(f"{r['metric']:12s} {report.fmt(r['value'])} [{report.fmt(r['ci_lower'])}, {report.fmt(r['ci_upper'])}]")


def cmd_stratify(args):
    _merge(args, ["k"])
    records, ref, scored = _evaluate_common(args)
    _need(args, "k")
    out = _out(args)
    plan = analytics.temporal_bins(scored, int(args.k), ref, derive_seed(args.seed, "resample"))
    res = analytics.grade_balanced_resample(scored, plan, ref)
    rows, _ = analytics.subgroup_evaluate(res.records, "stratum", ref, ("all", "malignant"),
                                          int(args.n_boot or 1000), args.seed, plan=plan)
    report.write_metric_table(rows, out, "metrics_temporal")
    report.write_csv(res.audit, out / "stratification_audit.csv", ["core_id", "stratum", "isup", "kept"])
    for s in plan.strata:
        print(f"{s.label}: m_s={res.feasible_size[s.label]} keeps={res.keeps[s.label]}")
    if res.flagged:
        print(f"flagged strata (missing a target grade): {', '.join(res.flagged)}")


def cmd_interobserver(args):
    _merge(args, ["manifest", "n_boot"])
    _need(args, "manifest")
    out = _out(args)
    records = load_manifest(args.manifest)
    obs = observers_of(records) + [AI]
    subset = [r for r in records if all(r.grade(o) is not None for o in obs)]
    if not subset:
        raise ValidationError("no cores graded by every observer")
    io = analytics.interobserver_matrix(subset, obs, AI, int(args.n_boot or 1000), args.seed)
    report.write_table(io["pairs"], out, "interobserver_pairs")
    report.write_table(io["summary"], out, "interobserver_summary")
    print("ranking by ISUP QWK: " + " > ".join(io["ranking"]))


def cmd_survival(args):
    from .survival import cox_fit, hazard_table, load_survival_csv
    _merge(args, ["survival", "reference_group", "ties"])
    _need(args, "survival")
    out = _out(args)
    recs = load_survival_csv(args.survival)
    fit = cox_fit(recs, str(args.reference_group or "1"), ties=args.ties or "efron")
    if not fit.converged:
        raise ConvergenceError(fit.diagnostic)
    rows = hazard_table(fit, recs)
    report.write_table(rows, out, "hazard_table")
    for r in rows:
        print(f"{r['group']:>6s} n={r['n']:<5d} HR={report.fmt(r['hr'])}")


def cmd_synth(args):
    from .synth import SynthSpec, generate_synthetic_cohort, kernel_with_kappa, write_synthetic_cohort
    spec_d = _load_config(args.config)
    spec_d = dict(spec_d.get("synth", spec_d))
    for key in ("n_cores", "mode", "empty_cores"):
        if getattr(args, key) is not None:
            spec_d[key] = getattr(args, key)
    if args.seed is not None:
        spec_d["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_d)
    if args.kappa is not None:
        spec.kernel = kernel_with_kappa(spec.mixture, args.kappa).tolist()
        spec.__post_init__()
    paths = write_synthetic_cohort(generate_synthetic_cohort(spec), _out(args))
    print(f"synthetic cohort written to {paths['manifest'].parent}")


def cmd_run(args):
    from .pipeline import PipelineConfig, run_pipeline
    if args.config is None:
        raise ValidationError("run needs --config")
    cfg = PipelineConfig.from_file(args.config, seed=args.seed, out=args.out)
    res = run_pipeline(cfg)
    print(f"{len(res['files'])} files written to {cfg.out}")


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed for all random streams")
    common.add_argument("--config", default=None, help="JSON file with option defaults")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gleasonkit", description="Core-level Gleason grading toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tile", parents=[common], help="plan patches, assign to cores, report empty cores")
    s.add_argument("--annotations", help="directory of <slide>.json + <slide>.mask.png")
    s.add_argument("--base-resolution", type=float, dest="base_resolution")
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("infer", parents=[common], help="10-model ensemble inference on patch bundles")
    s.add_argument("--bundles")
    s.add_argument("--weights", nargs="+")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_infer)

    for name, func, helptext in (("evaluate", cmd_evaluate, "overall and subgroup metrics"),
                                 ("stratify", cmd_stratify, "temporal strata and balanced resampling")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--manifest")
        s.add_argument("--reference", help="reference observer id")
        s.add_argument("--n-boot", type=int, dest="n_boot")
        if name == "evaluate":
            s.add_argument("--group-by", nargs="*", dest="group_by", choices=["region", "dataset"])
        else:
            s.add_argument("--k", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("interobserver", parents=[common], help="pairwise observer agreement")
    s.add_argument("--manifest")
    s.add_argument("--n-boot", type=int, dest="n_boot")
    s.set_defaults(func=cmd_interobserver)

    s = sub.add_parser("survival", parents=[common], help="Cox hazard table by grade group")
    s.add_argument("--survival", help="CSV with patient_id,time_years,event,group")
    s.add_argument("--reference-group", dest="reference_group")
    s.add_argument("--ties", choices=["efron", "breslow"])
    s.set_defaults(func=cmd_survival)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--n-cores", type=int, dest="n_cores")
    s.add_argument("--mode", choices=["labels", "pixels"])
    s.add_argument("--empty-cores", type=int, dest="empty_cores")
    s.add_argument("--kappa", type=float, help="use a confusion kernel with this analytic kappa")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("run", parents=[common], help="full pipeline from a JSON config")
    s.set_defaults(func=cmd_run)
    return p


def _exit_code(exc):
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    return EXIT_VALIDATION


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "synth" and args.command != "run" and args.seed is None:
        cfg = _load_config(args.config) if args.config else {}
        args.seed = int(cfg.get("seed", 0))
    try:
        args.func(args)
    except (GleasonKitError, FileNotFoundError, ValueError) as exc:
        print(f"gleasonkit {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
