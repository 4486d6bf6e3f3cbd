"""CSV/JSON emission with fixed, round-trippable number formatting."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

METRIC_COLUMNS = ("group", "scope", "metric", "value", "ci_lower", "ci_upper", "n",
                  "n_undefined", "unstable", "note")


def fmt(v):
    """Reals with 17 significant digits; NaN as ``nan``; None as empty."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, ".17g")
    return str(v)


def _jsonable(v):
    if isinstance(v, float) and (math.isnan(v) or math.isinf(v)):
        return None
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        return _jsonable(v.item())
    return v


def write_json(obj, path):
    Path(path).write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=1) + "\n")


def write_csv(rows, path, columns=None):
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def write_table(rows, out_dir, stem, columns=None):
    """Write ``stem.csv`` and ``stem.json``; returns both paths."""
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    write_csv(rows, csv_path, columns)
    write_json(list(rows), json_path)
    return [csv_path, json_path]


def write_metric_table(rows, out_dir, stem):
    return write_table(rows, out_dir, stem, METRIC_COLUMNS)


def read_metric_csv(path):
    """Inverse of :func:`write_metric_table` for the CSV variant."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for key in ("value", "ci_lower", "ci_upper"):
                row[key] = float(row[key])
            row["n"] = int(row["n"])
            row["n_undefined"] = int(row["n_undefined"])
            row["unstable"] = row["unstable"] == "true"
            out.append(row)
    return out
