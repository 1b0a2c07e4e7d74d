"""
Metrics sinks for ACT Lab.
CSV and JSON-lines writers and readers for MetricsRecord streams.
"""

import csv
import io
import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Union

from ..core.records import FIELDS, MetricsRecord
from .integrity import atomic_write_text

logger = logging.getLogger(__name__)

FORMATS = ("csv", "jsonl")


class MetricsError(Exception):
    """Exception raised for unreadable or unwritable metrics files."""

    pass


def _check_format(fmt: str) -> str:
    if fmt not in FORMATS:
        raise MetricsError(f"Unknown metrics format '{fmt}', expected one of {FORMATS}")
    return fmt


def format_from_path(path: Union[str, Path]) -> str:
    suffix = Path(path).suffix.lstrip(".").lower()
    return _check_format(suffix)


def encode_metrics(records: Iterable[MetricsRecord], fmt: str) -> str:
    """
    Render records as CSV (header row first) or JSON lines.

    Missing values are empty cells in CSV and nulls in JSON.
    """
    _check_format(fmt)
    rows = [record.to_dict() for record in records]
    if fmt == "jsonl":
        return "".join(json.dumps(row) + "\n" for row in rows)

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buffer.getvalue()


def decode_metrics(text: str, fmt: str, source: str = "<text>") -> list[MetricsRecord]:
    """
    Parse records written by ``encode_metrics``.

    Raises:
        MetricsError: On malformed rows or unknown columns
    """
    _check_format(fmt)
    try:
        if fmt == "jsonl":
            return [MetricsRecord.from_dict(json.loads(line)) for line in text.splitlines() if line]
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames and tuple(reader.fieldnames) != FIELDS:
            raise MetricsError(f"{source}: unexpected CSV columns {reader.fieldnames}")
        return [MetricsRecord.from_dict(row) for row in reader]
    except (json.JSONDecodeError, ValueError, TypeError) as e:
        logger.error(f"Failed to parse metrics from {source}: {e}")
        raise MetricsError(f"{source}: malformed metrics: {e}")


def write_metrics(
    records: Iterable[MetricsRecord],
    path: Union[str, Path],
    fmt: Optional[str] = None,
) -> Path:
    """
    Atomically write a metrics file.

    Args:
        records: Rows to write
        path: Destination; the format defaults to the file suffix
        fmt: "csv" or "jsonl"

    Returns:
        The written path
    """
    fmt = fmt or format_from_path(path)
    text = encode_metrics(records, fmt)
    try:
        atomic_write_text(path, text)
    except OSError as e:
        logger.error(f"Failed to write metrics {path}: {e}")
        raise MetricsError(f"Cannot write metrics {path}: {e}")
    logger.info(f"Wrote metrics to {path}")
    return Path(path)


def read_metrics(path: Union[str, Path], fmt: Optional[str] = None) -> list[MetricsRecord]:
    fmt = fmt or format_from_path(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to read metrics {path}: {e}")
        raise MetricsError(f"Cannot read metrics {path}: {e}")
    return decode_metrics(text, fmt, str(path))


def render_table(records: Iterable[MetricsRecord]) -> str:
    """Aligned plain-text table of the populated columns, for terminal output."""
    rows = [record.to_dict() for record in records]
    if not rows:
        return ""
    columns = [name for name in FIELDS if any(row[name] not in (None, "") for row in rows)]
    cells = [[_cell(row[name]) for name in columns] for row in rows]
    widths = [max(len(name), *(len(r[i]) for r in cells)) for i, name in enumerate(columns)]
    lines = ["  ".join(name.ljust(w) for name, w in zip(columns, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
