"""Append-only CSV metrics with a fixed column order."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Optional

from ..training import METRIC_COLUMNS

INT_COLUMNS = {"step", "episode", "partition-size", "success", "seed"}
FLOAT_COLUMNS = {"P_act", "P_act^max", "td-loss", "obs-model-nll", "action-model-ce", "return"}
PHASES = {"pretrain", "adversarial", "vanilla"}


class SchemaError(ValueError):
    pass


def _fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def validate_row(row: dict) -> list:
    """Check one row and return its cells in column order."""
    keys = set(row)
    want = set(METRIC_COLUMNS)
    if keys != want:
        extra, missing = sorted(keys - want), sorted(want - keys)
        raise SchemaError(f"row keys differ from schema: missing {missing}, unexpected {extra}")
    cells = []
    for col in METRIC_COLUMNS:
        v = row[col]
        if col in INT_COLUMNS:
            if isinstance(v, bool):
                v = int(v)
            if not isinstance(v, int) and not (isinstance(v, float) and v.is_integer()):
                raise SchemaError(f"column {col} expects an integer, got {v!r}")
            cells.append(str(int(v)))
        elif col in FLOAT_COLUMNS:
            try:
                cells.append(_fmt_float(v))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"column {col} expects a number, got {v!r}") from exc
        else:
            if v not in PHASES:
                raise SchemaError(f"unknown phase {v!r}")
            cells.append(v)
    return cells


class MetricsWriter:
    """Single-owner CSV writer. The header is written only when the file is new or empty."""

    def __init__(self, path, jsonl: Optional[str] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._csv.writerow(METRIC_COLUMNS)
        self._json = open(jsonl, "a", encoding="utf-8") if jsonl else None
        self.rows = 0

    def write(self, row: dict) -> None:
        cells = validate_row(row)
        self._csv.writerow(cells)
        if self._json is not None:
            self._json.write(json.dumps(dict(zip(METRIC_COLUMNS, cells))) + "\n")
        self.rows += 1

    __call__ = write

    def close(self) -> None:
        self._fh.close()
        if self._json is not None:
            self._json.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(rows: Iterable[dict], path, jsonl: Optional[str] = None) -> int:
    with MetricsWriter(path, jsonl) as w:
        for r in rows:
            w.write(r)
        return w.rows


def read_metrics(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_COLUMNS:
            raise SchemaError(f"unexpected header {header}")
        return [dict(zip(header, r)) for r in reader]
