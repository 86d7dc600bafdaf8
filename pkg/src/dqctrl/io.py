"""CSV field export/import and the JSON run report."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def write_field_csv(path, times, values) -> None:
    """One row per time node: ``t, x0, x1, ...``, 17 significant digits."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    times = np.asarray(times, dtype=float)
    if values.shape[0] != times.shape[0]:
        raise ValueError("one time per row is required")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{j}" for j in range(values.shape[1])])
        for t, row in zip(times, values):
            w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in row])


def read_field_csv(path):
    """Inverse of `write_field_csv`; returns ``(times, values)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ValueError(f"{path}: missing 't,x0,...' header")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
    return data[:, 0], data[:, 1:]


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if np.isnan(f):
            return "nan"
        if np.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def write_report(path, report: dict) -> None:
    """Deterministic JSON: sorted keys, fixed layout, no timestamps."""
    body = {"schema_version": SCHEMA_VERSION, **report}
    Path(path).write_text(json.dumps(_clean(body), sort_keys=True, indent=2) + "\n")
