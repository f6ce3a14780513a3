"""CSV and JSON input/output.

Numbers are written with ``repr``, which is the shortest decimal string
that round-trips to the same float, so files are stable and lossless.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .basis import Partition
from .errors import ValidationError

SCHEMA_VERSION = "1.0"


def _rows(path: Path, what: str) -> list[list[str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except FileNotFoundError:
        raise ValidationError(f"{what} file {str(path)!r} does not exist") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot read {what} file {str(path)!r}: {exc}") from None
    if not rows:
        raise ValidationError(f"{what} file {str(path)!r} is empty")
    return rows


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_matrix(path, what: str = "matrix", *, header: bool | None = None) -> tuple[np.ndarray, list[str]]:
    """Read a numeric CSV; returns ``(values, column names)``.

    With ``header=None`` a first row containing any non-numeric cell is
    taken as the header.  Empty cells and non-numeric values are errors.
    """
    path = Path(path)
    rows = _rows(path, what)
    if header is None:
        header = not all(_is_number(c) for c in rows[0])
    names = [c.strip() for c in rows[0]] if header else [f"V{j + 1}" for j in range(len(rows[0]))]
    body = rows[1:] if header else rows
    if not body:
        raise ValidationError(f"{what} file {str(path)!r} has a header but no data rows")
    width = len(names)
    out = np.empty((len(body), width))
    for i, row in enumerate(body):
        line = i + (2 if header else 1)
        if len(row) != width:
            raise ValidationError(f"{what} file {str(path)!r}, line {line}: expected {width} "
                                  f"columns, found {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.upper() in ("NA", "NAN"):
                raise ValidationError(f"{what} file {str(path)!r}, line {line}, column {names[j]!r}: "
                                      "missing value")
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise ValidationError(f"{what} file {str(path)!r}, line {line}, column {names[j]!r}: "
                                      f"{cell!r} is not a number") from None
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{what} file {str(path)!r} contains non-finite values")
    return out, names


def read_vector(path, what: str = "outcome") -> tuple[np.ndarray, str]:
    a, names = read_matrix(path, what)
    if a.shape[1] != 1:
        raise ValidationError(f"{what} file {str(path)!r} must have exactly one column, found {a.shape[1]}")
    return a[:, 0], names[0]


def read_partition(path) -> Partition:
    """Two columns ``index,group``; indices are 0-based predictor columns."""
    path = Path(path)
    rows = _rows(path, "partition")
    if not _is_number(rows[0][0]):
        rows = rows[1:]
    pairs = []
    for i, row in enumerate(rows):
        if len(row) != 2:
            raise ValidationError(f"partition file {str(path)!r}: every row needs index,group "
                                  f"(row {i + 1} has {len(row)} fields)")
        try:
            idx = int(row[0])
        except ValueError:
            raise ValidationError(f"partition file {str(path)!r}: index {row[0]!r} is not an integer") from None
        pairs.append((idx, row[1].strip()))
    return Partition.from_pairs(pairs)


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    return path


def jsonable(obj):
    """Recursively convert numpy values; NaN and infinities become ``None``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
