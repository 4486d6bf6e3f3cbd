"""Cohort records and manifest ingestion (CSV or JSON-lines)."""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .grading import GleasonScore, isup_from_gleason

REQUIRED_COLUMNS = ("core_id", "patient_id", "region", "dataset", "collection_date")
GRADE_PREFIX = "grade_"
AI = "ai"


@dataclass
class CohortRecord:
    core_id: str
    patient_id: str
    region: str = ""
    dataset: str = ""
    collection_date: dt.date | None = None
    observer_grades: dict = field(default_factory=dict)
    ai_gleason: GleasonScore | None = None
    ai_cancer_prob: float | None = None
    slide_id: str = ""
    ai_verdict: object = None

    def __post_init__(self):
        if not self.observer_grades and self.ai_gleason is None:
            raise ValidationError(f"core {self.core_id}: needs an observer grade or an AI verdict")

    def grade(self, observer) -> GleasonScore | None:
        if observer == AI:
            return self.ai_gleason
        return self.observer_grades.get(observer)

    def isup(self, observer):
        g = self.grade(observer)
        return None if g is None else isup_from_gleason(g)

    def set_verdict(self, verdict):
        self.ai_verdict = verdict
        self.ai_gleason = verdict.gleason
        self.ai_cancer_prob = verdict.cancer_prob


def _parse_date(text, where):
    try:
        return dt.date.fromisoformat(str(text).strip())
    except ValueError:
        raise ValidationError(f"{where}: collection_date {text!r} is not ISO-8601 (YYYY-MM-DD)") from None


def _row_to_record(row, where):
    missing = [c for c in REQUIRED_COLUMNS if c not in row]
    if missing:
        raise ValidationError(f"{where}: missing column {missing[0]!r}")
    core_id = str(row["core_id"]).strip()
    if not core_id:
        raise ValidationError(f"{where}: empty core_id")
    grades = {}
    for key, val in row.items():
        if key.startswith(GRADE_PREFIX) and val not in (None, ""):
            try:
                grades[key[len(GRADE_PREFIX):]] = GleasonScore.parse(val)
            except ValidationError as exc:
                raise ValidationError(f"{where}: column {key!r}: {exc}") from None
    ai_gs = None
    if row.get("ai_gleason") not in (None, ""):
        try:
            ai_gs = GleasonScore.parse(row["ai_gleason"])
        except ValidationError as exc:
            raise ValidationError(f"{where}: column 'ai_gleason': {exc}") from None
    ai_prob = None
    if row.get("ai_cancer_prob") not in (None, ""):
        try:
            ai_prob = float(row["ai_cancer_prob"])
        except ValueError:
            raise ValidationError(f"{where}: column 'ai_cancer_prob' is not a number") from None
        if not (0.0 <= ai_prob <= 1.0) or math.isnan(ai_prob):
            raise ValidationError(f"{where}: column 'ai_cancer_prob' outside [0, 1]")
    date = None
    if row.get("collection_date") not in (None, ""):
        date = _parse_date(row["collection_date"], where)
    try:
        return CohortRecord(core_id, str(row["patient_id"]), str(row["region"] or ""),
                            str(row["dataset"] or ""), date, grades, ai_gs, ai_prob,
                            str(row.get("slide_id") or ""))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def load_manifest(path) -> list[CohortRecord]:
    """Parse and validate a cohort manifest; ``.jsonl``/``.json`` or CSV by suffix."""
    path = Path(path)
    if path.suffix in (".jsonl", ".json"):
        rows = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if line.strip():
                try:
                    rows.append((f"{path}:{lineno}", json.loads(line)))
                except ValueError:
                    raise ValidationError(f"{path}:{lineno}: invalid JSON") from None
    else:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ValidationError(f"{path}: missing column {missing[0]!r}")
            rows = [(f"{path}:row {i}", r) for i, r in enumerate(reader, start=2)]
    records = []
    seen = set()
    for where, row in rows:
        rec = _row_to_record(row, where)
        if rec.core_id in seen:
            raise ValidationError(f"{where}: duplicate core_id {rec.core_id!r}")
        seen.add(rec.core_id)
        records.append(rec)
    return records


def observers_of(records):
    """Observer ids in first-seen order."""
    out = []
    for r in records:
        for o in r.observer_grades:
            if o not in out:
                out.append(o)
    return out


def write_manifest(records, path, observers=None):
    observers = observers or observers_of(records)
    cols = list(REQUIRED_COLUMNS) + ["slide_id"] + [GRADE_PREFIX + o for o in observers]
    cols += ["ai_gleason", "ai_cancer_prob"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow(
                [r.core_id, r.patient_id, r.region, r.dataset,
                 r.collection_date.isoformat() if r.collection_date else "", r.slide_id]
                + [str(r.observer_grades[o]) if o in r.observer_grades else "" for o in observers]
                + [str(r.ai_gleason) if r.ai_gleason else "",
                   format(r.ai_cancer_prob, ".17g") if r.ai_cancer_prob is not None else ""]
            )
