from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from gnn_seg.artifacts import atomic_write_json, atomic_write_text
from gnn_seg.exceptions import ImageIOError, ValidationError
from gnn_seg.metrics import MetricsReport, summarize_reports

METRICS_CSV_HEADERS = ["slice", "class", "dice", "tp", "apd", "flags"]
LOSS_CSV_HEADERS = ["epoch", "loss"]
EXPORT_FORMATS = ("json", "csv")


class ExportError(ValidationError):
    pass


def _cell(value: float | None) -> str:
    return "NA" if value is None else repr(value)


def metrics_rows(reports: Sequence[MetricsReport]) -> list[dict[str, str]]:
    rows: list[dict[str, str]] = []
    for report in reports:
        for c in report.classes:
            rows.append(
                {
                    "slice": report.slice_id,
                    "class": c.name,
                    "dice": _cell(c.dice),
                    "tp": _cell(c.tp),
                    "apd": _cell(c.apd),
                    "flags": ";".join(c.flags),
                }
            )
    return rows


def export_metrics(reports: Sequence[MetricsReport], fmt: str, out_path: Path) -> Path:
    """One JSON document (reports + summary) or one CSV row per class per slice."""
    if fmt == "json":
        payload: dict[str, Any] = {
            "reports": [r.to_dict() for r in reports],
            "summary": summarize_reports(reports).to_dict(),
        }
        atomic_write_json(out_path, payload)
        return out_path

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRICS_CSV_HEADERS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(metrics_rows(reports))
        atomic_write_text(out_path, buf.getvalue())
        return out_path

    raise ExportError(f"unsupported format: {fmt}", allowed=list(EXPORT_FORMATS))


def write_loss_trace(trace: Sequence[float], out_path: Path) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_CSV_HEADERS)
    for epoch, loss in enumerate(trace, start=1):
        writer.writerow([epoch, repr(float(loss))])
    atomic_write_text(out_path, buf.getvalue())
    return out_path


def read_loss_trace(path: Path) -> list[float]:
    try:
        with path.open(encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError as e:
        raise ImageIOError(f"loss trace not found: {path}") from e
    try:
        return [float(row["loss"]) for row in rows]
    except (KeyError, ValueError) as e:
        raise ExportError(f"malformed loss trace: {path}") from e
