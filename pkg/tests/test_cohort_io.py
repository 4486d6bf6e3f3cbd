import datetime as dt
import json
import math

import numpy as np
import pytest

from gleasonkit import report
from gleasonkit.cohort import AI, load_manifest, observers_of, write_manifest
from gleasonkit.errors import ValidationError
from gleasonkit.formats import PatchBundle, read_bundle, write_bundle
from gleasonkit.grading import GleasonScore

HEADER = "core_id,patient_id,region,dataset,collection_date,grade_ref,grade_b,ai_gleason,ai_cancer_prob\n"


def _write(tmp_path, body, name="m.csv", header=HEADER):
    p = tmp_path / name
    p.write_text(header + body)
    return p


def test_manifest_three_rows(tmp_path):
    p = _write(tmp_path, "a,p1,N,d1,2001-02-03,3+4,4+3,3+4,0.9\n"
                         "b,p1,N,d1,2001-02-03,0+0,,0+0,0.1\n"
                         "c,p2,S,d2,,5+5,5+4,,\n")
    recs = load_manifest(p)
    assert [r.core_id for r in recs] == ["a", "b", "c"]
    assert recs[0].collection_date == dt.date(2001, 2, 3) and recs[2].collection_date is None
    assert recs[1].grade("b") is None and recs[2].grade(AI) is None
    assert recs[0].isup("b") == 3 and recs[0].ai_cancer_prob == 0.9
    assert observers_of(recs) == ["ref", "b"]


@pytest.mark.parametrize("body, match", [
    ("a,p,N,d,2001-01-01,3+3,,3+3,0.5\na,p,N,d,2001-01-01,3+3,,3+3,0.5\n", "duplicate core_id 'a'"),
    ("a,p,N,d,2001-01-01,6+1,,3+3,0.5\n", "grade_ref"),
    ("a,p,N,d,01/02/2001,3+3,,3+3,0.5\n", "ISO-8601"),
    ("a,p,N,d,2001-01-01,3+3,,3+3,1.5\n", "ai_cancer_prob"),
    ("a,p,N,d,2001-01-01,,,,\n", "needs an observer grade"),
])
def test_manifest_errors_name_the_row(tmp_path, body, match):
    with pytest.raises(ValidationError, match=match) as err:
        load_manifest(_write(tmp_path, body))
    assert "row" in str(err.value)


def test_manifest_missing_column(tmp_path):
    with pytest.raises(ValidationError, match="collection_date"):
        load_manifest(_write(tmp_path, "", header="core_id,patient_id,region,dataset\n"))


def test_manifest_jsonl_and_round_trip(tmp_path):
    rows = [{"core_id": "x", "patient_id": "p", "region": "R", "dataset": "D",
             "collection_date": "2010-05-06", "grade_ref": "4+5", "ai_gleason": "4+4", "ai_cancer_prob": 0.75},
            {"core_id": "y", "patient_id": "p", "region": "R", "dataset": "D",
             "collection_date": "2010-05-07", "grade_ref": "3+3"}]
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    recs = load_manifest(p)
    assert recs[0].grade("ref") == GleasonScore(4, 5) and recs[1].ai_gleason is None
    write_manifest(recs, tmp_path / "back.csv")
    back = load_manifest(tmp_path / "back.csv")
    assert [(r.core_id, r.observer_grades, r.ai_gleason, r.ai_cancer_prob, r.collection_date) for r in back] == \
        [(r.core_id, r.observer_grades, r.ai_gleason, r.ai_cancer_prob, r.collection_date) for r in recs]
    (tmp_path / "bad.jsonl").write_text("{not json}\n")
    with pytest.raises(ValidationError, match=":1"):
        load_manifest(tmp_path / "bad.jsonl")


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (3, 256, 256, 3), dtype=np.uint8)
    b = PatchBundle("core1", [(0, 0), (256, 0), (0, 256)], pixels=pix)
    write_bundle(b, tmp_path / "b.gkb")
    back = read_bundle(tmp_path / "b.gkb")
    assert back.core_id == "core1" and back.kind == "pixels"
    assert np.array_equal(back.pixels, pix) and np.array_equal(back.coords, b.coords)
    feats = PatchBundle("core2", [(5, 6)], features=rng.normal(size=(1, 1000)).astype(np.float32))
    write_bundle(feats, tmp_path / "f.gkb")
    assert np.array_equal(read_bundle(tmp_path / "f.gkb").features, feats.features)


def test_bundle_corruption_detected(tmp_path):
    b = PatchBundle("c", [(0, 0)], features=np.ones((1, 8), np.float32))
    path = tmp_path / "b.gkb"
    write_bundle(b, path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "flip.gkb").write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="checksum"):
        read_bundle(tmp_path / "flip.gkb")
    (tmp_path / "cut.gkb").write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValidationError, match="payload"):
        read_bundle(tmp_path / "cut.gkb")
    (tmp_path / "magic.gkb").write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValidationError):
        read_bundle(tmp_path / "magic.gkb")


def test_bundle_shape_validation():
    with pytest.raises(ValidationError):
        PatchBundle("c", [(0, 0)], pixels=np.zeros((1, 128, 128, 3), np.uint8))
    with pytest.raises(ValidationError):
        PatchBundle("c", [(0, 0)])


def test_metric_table_round_trip(tmp_path):
    rows = [{"group": "all", "scope": "all", "metric": "isup_qwk", "value": 0.1 + 0.2,
             "ci_lower": 1 / 3, "ci_upper": 0.9, "n": 12, "n_undefined": 0, "unstable": False, "note": ""},
            {"group": "x", "scope": "malignant", "metric": "gs_cindex", "value": math.nan,
             "ci_lower": math.nan, "ci_upper": math.nan, "n": 0, "n_undefined": 1000, "unstable": True,
             "note": "undefined: empty group"}]
    report.write_metric_table(rows, tmp_path, "t")
    back = report.read_metric_csv(tmp_path / "t.csv")
    assert back[0] == rows[0]
    assert math.isnan(back[1]["value"]) and back[1]["unstable"] and back[1]["n_undefined"] == 1000
    assert json.loads((tmp_path / "t.json").read_text())[1]["value"] is None


def test_fmt():
    assert report.fmt(0.1) == "0.10000000000000001"
    assert report.fmt(math.nan) == "nan" and report.fmt(None) == "" and report.fmt(True) == "true"
    assert float(report.fmt(2 / 3)) == 2 / 3
