"""Per-batch CSV and JSON summary writers.

Floats are written with ``repr`` so a rerun with the same seed produces
byte-identical files. Undefined metrics (no ID or no OOD samples seen yet)
are written as empty CSV cells and JSON ``null``.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .metrics import MetricsSummary, accuracy, auroc

SCHEMA_VERSION = "1.0"
LOSS_KEYS = ("entropy", "ood", "sim", "first", "second")
CSV_COLUMNS = (
    "batch",
    "running_acc",
    "running_auroc",
    "batch_acc",
    "batch_auroc",
    "mask_count",
    *(f"loss_{k}" for k in LOSS_KEYS),
    "eps_norm",
    "skipped",
)
CSV_COMMENT = (
    "# batch: 0-based index; running_*: ACC (ID only) and AUROC (OOD positive, score = fused entropy) "
    "over batches 0..batch; batch_*: same on this batch alone; mask_count: samples above the entropy "
    "threshold; loss_*: objective terms at the pre-update parameters (second = perturbed pass); "
    "eps_norm: SAM perturbation norm; skipped: 1 if the update was skipped"
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def csv_rows(reports, batches) -> list[list[str]]:
    """One row per batch with cumulative and per-batch metrics."""
    if len(reports) != len(batches):
        raise ValueError(f"{len(reports)} reports for {len(batches)} batches")
    rows = []
    preds, labels, scores, flags = [], [], [], []
    for t, (r, b) in enumerate(zip(reports, batches)):
        ood = np.asarray(b.is_ood, dtype=bool)
        preds.append(r.preds)
        labels.append(b.labels)
        scores.append(r.scores)
        flags.append(ood)
        P, L, S, F = (np.concatenate(x) for x in (preds, labels, scores, flags))
        rows.append(
            [
                _cell(t),
                _cell(accuracy(P, L, ~F)),
                _cell(auroc(S, F)),
                _cell(accuracy(r.preds, b.labels, ~ood)),
                _cell(auroc(r.scores, ood)),
                _cell(r.mask_count),
                *(_cell(r.losses.get(k)) for k in LOSS_KEYS),
                _cell(r.eps_norm),
                _cell(r.skipped),
            ]
        )
    return rows


def render_csv(reports, batches) -> str:
    buf = io.StringIO()
    buf.write(CSV_COMMENT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(csv_rows(reports, batches))
    return buf.getvalue()


def summary_document(summary: MetricsSummary, seed: int, config: dict, **extra) -> dict:
    doc = {"spec_version": SCHEMA_VERSION, "seed": int(seed), "config": config, "metrics": summary.to_dict()}
    doc.update(extra)
    return doc


def dumps_summary(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def loads_summary(text: str) -> dict:
    return json.loads(text)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err


def emit_reports(reports, batches, summary_doc: dict, out_dir, stem: str = "run") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json`` under ``out_dir``; return both paths."""
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    _write(csv_path, render_csv(reports, batches))
    _write(json_path, dumps_summary(summary_doc))
    return csv_path, json_path
