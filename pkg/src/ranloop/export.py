"""Line-delimited JSON export of telemetry, decision, audit and rollback records."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

RECORD_TYPES = ("telemetry", "decision", "audit", "rollback")
FLOAT_DIGITS = 9


class ExportError(OSError):
    pass


def normalize(obj):
    """Make ``obj`` JSON-safe with fixed-precision floats and no locale or ordering dependence."""
    if isinstance(obj, dict):
        return {str(k): normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [normalize(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return float(f"{x:.{FLOAT_DIGITS}g}")
    return obj


def encode_record(record: dict) -> str:
    if record.get("type") not in RECORD_TYPES:
        raise ValueError(f"record type must be one of {RECORD_TYPES}, got {record.get('type')!r}")
    return json.dumps(normalize(record), sort_keys=True, ensure_ascii=False, allow_nan=False,
                      separators=(",", ":"))


def encode_stream(stream) -> bytes:
    return "".join(encode_record(r) + "\n" for r in stream).encode("utf-8")


def export_records(stream, path) -> int:
    """Write one record per line to ``path``; returns the number of bytes written."""
    data = encode_stream(stream)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ExportError(f"cannot write export {path}: {exc.strerror or exc}") from exc
    return len(data)


def read_records(path) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot read export {path}: {exc.strerror or exc}") from exc
    return [json.loads(line) for line in text.splitlines() if line]


def first_divergence(a: bytes, b: bytes) -> tuple[int, str, str] | None:
    """1-based line number and the two differing lines, or None when identical."""
    if a == b:
        return None
    la, lb = a.decode("utf-8").split("\n"), b.decode("utf-8").split("\n")
    for i in range(max(len(la), len(lb))):
        x = la[i] if i < len(la) else "<end of file>"
        y = lb[i] if i < len(lb) else "<end of file>"
        if x != y:
            return i + 1, x, y
    return len(la), "", ""
