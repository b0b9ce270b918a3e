"""CSV ingestion and report writing."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .data import AggregateTable, SurveyDataset


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def _read(path, leading):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if header[:len(leading)] != list(leading):
            raise InputError(f"{path}: header must start with {','.join(leading)}, "
                             f"got {','.join(header[:len(leading)])}")
        if len(set(header)) != len(header):
            dup = sorted({h for h in header if header.count(h) > 1})
            raise InputError(f"{path}: duplicate column names {dup}")
        names = tuple(header[len(leading):])
        if not names:
            raise InputError(f"{path}: no covariate columns")
        ids, values = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: row {row_no} has {len(row)} cells, "
                                 f"expected {len(header)}")
            area = row[0].strip()
            if not area:
                raise InputError(f"{path}: row {row_no}: empty area_id")
            parsed = []
            for name, cell in zip(header[1:], row[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f"{path}: row {row_no}, column {name}: "
                                     f"non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise InputError(f"{path}: row {row_no}, column {name}: "
                                     f"non-finite value {cell!r}")
                parsed.append(v)
            ids.append(area)
            values.append(parsed)
    if not ids:
        raise InputError(f"{path}: no data rows")
    return names, ids, np.array(values, dtype=np.float64)


def load_survey(path) -> SurveyDataset:
    """Read ``area_id,y,<covariates...>``; covariate order follows the header."""
    names, ids, values = _read(path, ("area_id", "y"))
    return SurveyDataset(np.array(ids, dtype=object), values[:, 0], values[:, 1:], names)


def load_aggregates(path) -> AggregateTable:
    """Read ``area_id,N,<covariate means...>``."""
    names, ids, values = _read(path, ("area_id", "N"))
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate area_id")
    N = values[:, 0]
    if (N != np.round(N)).any() or (N < 1).any():
        raise InputError(f"{path}: N must be a positive integer")
    return AggregateTable(tuple(ids), N.astype(np.int64), values[:, 1:], names)


def fmt6(v) -> str:
    """Six significant digits; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6g}"
    return str(v)


def fmt_full(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, header, rows) -> None:
    """Write ``path`` at six significant digits and ``<stem>.full.csv`` at full precision."""
    path = Path(path)
    rows = list(rows)
    full = path.with_name(path.stem + ".full.csv")
    for target, fmt in ((path, fmt6), (full, fmt_full)):
        with open(target, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
