import numpy as np
import pytest
from scipy.stats import chisquare

from gleasonkit import metrics, synth
from gleasonkit.errors import DegenerateError, ValidationError


def test_identity_kernel_gives_perfect_agreement():
    cohort = synth.generate_synthetic_cohort(synth.SynthSpec(n_cores=300, seed=1))
    assert cohort.truth["ai_isup"] == cohort.truth["true_isup"]
    ref = [r.isup("ref") for r in cohort.records]
    ai = [r.isup("ai") for r in cohort.records]
    assert metrics.weighted_kappa(ref, ai) == 1.0


def test_analytic_kappa_examples():
    m = [0.5, 0.5]
    assert synth.analytic_kappa([[0.75, 0.25], [0.25, 0.75]], m) == pytest.approx(0.5, abs=1e-15)
    assert synth.analytic_kappa([m, m], m) == pytest.approx(0.0, abs=1e-15)
    assert synth.analytic_kappa(np.eye(2), m) == 1.0
    with pytest.raises(DegenerateError):
        synth.analytic_kappa(np.eye(2), [1.0, 0.0])
    with pytest.raises(ValidationError):
        synth.analytic_kappa([[0.5, 0.6], [0.5, 0.5]], m)


@pytest.mark.parametrize("kappa", [0.0, 0.3, 0.9])
@pytest.mark.parametrize("weighting", ["linear", "quadratic"])
def test_kernel_with_kappa_hits_target(kappa, weighting):
    K = synth.kernel_with_kappa(synth.DEFAULT_MIXTURE, kappa)
    assert synth.analytic_kappa(K, synth.DEFAULT_MIXTURE, weighting) == pytest.approx(kappa, abs=1e-12)


def test_mixture_goodness_of_fit():
    mix = (0.3, 0.25, 0.15, 0.12, 0.1, 0.08)
    cohort = synth.generate_synthetic_cohort(synth.SynthSpec(n_cores=20_000, mixture=mix, seed=77))
    counts = np.bincount(cohort.truth["true_isup"], minlength=6)
    assert chisquare(counts, np.array(mix) * counts.sum()).pvalue > 0.01


def test_within_grade_scores_follow_table():
    cohort = synth.generate_synthetic_cohort(synth.SynthSpec(n_cores=400, seed=3))
    for isup, gs in zip(cohort.truth["true_isup"], cohort.truth["true_gleason"]):
        assert gs in synth.DEFAULT_GS_WITHIN.get(isup, synth._GS_OF_ISUP.get(isup))


def test_survival_censoring_rate_targets_share():
    spec = synth.SynthSpec(n_cores=20_000, cores_per_patient=1, censor_rate=0.4, seed=5)
    cohort = synth.generate_synthetic_cohort(spec)
    censored = np.mean([not s.event for s in cohort.survival])
    assert abs(censored - 0.4) < 0.02


def test_same_seed_same_bytes(tmp_path):
    spec = synth.SynthSpec(n_cores=40, regions={"A": 15, "B": 25}, seed=12)
    a = synth.write_synthetic_cohort(synth.generate_synthetic_cohort(spec), tmp_path / "a")
    b = synth.write_synthetic_cohort(synth.generate_synthetic_cohort(spec), tmp_path / "b")
    for key in ("manifest", "survival", "truth"):
        assert a[key].read_bytes() == b[key].read_bytes()
    other = synth.write_synthetic_cohort(
        synth.generate_synthetic_cohort(synth.SynthSpec(n_cores=40, regions={"A": 15, "B": 25}, seed=13)),
        tmp_path / "c")
    assert other["manifest"].read_bytes() != a["manifest"].read_bytes()


def test_date_range_is_pinned():
    cohort = synth.generate_synthetic_cohort(synth.SynthSpec(n_cores=50, seed=0))
    dates = [r.collection_date.isoformat() for r in cohort.records]
    assert min(dates) == "1998-01-13" and max(dates) == "2015-11-12"


def test_pixel_mode_assets(tmp_path):
    spec = synth.SynthSpec(n_cores=4, mode="pixels", empty_cores=1, cores_per_patient=4, seed=2)
    paths = synth.write_synthetic_cohort(synth.generate_synthetic_cohort(spec), tmp_path, n_models=10)
    assert len(paths["weights"]) == 10
    assert len(list(paths["bundles"].glob("*.gkb"))) == 3
    assert len(list(paths["annotations"].glob("*.mask.png"))) == 1


@pytest.mark.parametrize("kwargs", [
    {"mixture": (0.5, 0.5)},
    {"kernel": np.full((6, 6), 0.5).tolist()},
    {"gs_within": {4: {"4+5": 1.0}}},
    {"hazards": (0.1,) * 5},
    {"censor_rate": 1.0},
    {"regions": {"A": 3}},
    {"mode": "video"},
    {"empty_cores": 1},
])
def test_spec_validation(kwargs):
    with pytest.raises(ValidationError):
        synth.SynthSpec(**kwargs)


def test_spec_dict_round_trip():
    spec = synth.SynthSpec(n_cores=10, seed=4)
    assert synth.SynthSpec.from_dict(spec.to_dict()) == spec
