"""Metrics records and their CSV form."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields

import numpy as np


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    client_id: int
    loss_fp: float
    acc_fp: float
    loss_hard: float
    acc_hard: float
    grad_norm_sq: float
    lambda_t: float
    R_value: float


COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    # repr round-trips float64 exactly and is platform independent
    return repr(float(v))


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow([_fmt(v) for v in astuple(rec)])
    return buf.getvalue()


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records))


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(MetricsRecord(int(row["step"]), int(row["client_id"]),
                                     *(float(row[k]) for k in COLUMNS[2:])))
        return out
