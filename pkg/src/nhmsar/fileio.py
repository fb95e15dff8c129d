"""Series CSV and parameter/report JSON.

JSON is written canonically (sorted keys, two-space indent, floats with 17
significant digits) so that load followed by save reproduces the file byte
for byte.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from nhmsar.errors import NhmsarError

SCHEMA = "nhmsar/1"
_MISSING = {"", "na", "nan", "null", "none"}


class SeriesFormatError(NhmsarError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class SeriesFile:
    index: list
    value: np.ndarray | None
    z: np.ndarray | None
    r: np.ndarray | None

    def __len__(self) -> int:
        return len(self.index)

    def rainfall_rows(self) -> np.ndarray:
        """Observation rows ``[z..., r...]`` for the rainfall model."""
        if self.z is None or self.r is None:
            raise SeriesFormatError("rainfall data needs z and r columns")
        return np.column_stack([self.z, self.r])


def _increasing(index: list) -> bool:
    try:
        nums = [float(v) for v in index]
    except ValueError:
        return all(a < b for a, b in zip(index, index[1:]))
    return all(a < b for a, b in zip(nums, nums[1:]))


def read_series(path) -> SeriesFile:
    """Read ``index,value[,z1..zm][,r1..rl]``; lines starting with '#' are skipped.

    Columns ``regime`` and ``p1..pM`` are accepted and ignored.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(n, row) for n, row in enumerate(csv.reader(fh), start=1)
                if row and not row[0].startswith("#")]
    if not rows:
        raise SeriesFormatError("empty file")
    header_line, header = rows[0]
    header = [h.strip() for h in header]
    if header[0] != "index":
        raise SeriesFormatError("first column must be 'index'", header_line)
    # regime and p# columns are written by simulate and fit; they are read and ignored
    known = {"value", "regime"} | {h for h in header[1:] if h[:1] in "zrp" and h[1:].isdigit()}
    unknown = [h for h in header[1:] if h not in known]
    if unknown:
        raise SeriesFormatError(f"unknown columns {unknown}", header_line)
    index, data = [], []
    for n, row in rows[1:]:
        if len(row) != len(header):
            raise SeriesFormatError(f"expected {len(header)} fields, got {len(row)}", n)
        vals = []
        for h, cell in zip(header[1:], row[1:]):
            cell = cell.strip()
            if cell.lower() in _MISSING:
                raise SeriesFormatError(f"missing value in column {h!r}", n)
            try:
                v = float(cell)
            except ValueError:
                raise SeriesFormatError(f"cannot parse {cell!r} in column {h!r}", n) from None
            if not math.isfinite(v):
                raise SeriesFormatError(f"non-finite value in column {h!r}", n)
            vals.append(v)
        index.append(row[0].strip())
        data.append(vals)
    if not data:
        raise SeriesFormatError("no data rows")
    if not _increasing(index):
        raise SeriesFormatError("index must be strictly increasing")
    arr = np.array(data, dtype=float).reshape(len(data), len(header) - 1)
    cols = header[1:]

    def pick(prefix):
        idx = sorted((int(h[1:]), i) for i, h in enumerate(cols) if h[:1] == prefix and h[1:].isdigit())
        return arr[:, [i for _, i in idx]] if idx else None

    value = arr[:, cols.index("value")] if "value" in cols else None
    r = pick("r")
    if r is not None and np.any(r < 0):
        raise SeriesFormatError("rainfall columns must be non-negative")
    return SeriesFile(index, value, pick("z"), r)


def fmt_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def write_series(path, index, columns: dict, comment: str | None = None) -> None:
    """Write a CSV with an optional leading '#' comment line."""
    names = list(columns)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(["index"] + names) + "\n")
        for k, idx in enumerate(index):
            cells = [str(idx)]
            for n in names:
                v = columns[n][k]
                cells.append(str(int(v)) if isinstance(v, (int, np.integer)) else fmt_float(float(v)))
            fh.write(",".join(cells) + "\n")


def _encode(obj, indent: int) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(obj[k], indent + 1)}"
                 for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_encode(v, indent + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(inner + _encode(v, indent + 1) for v in seq) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return _encode(obj, 0) + "\n"


def save_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def bundled(name: str) -> Path:
    """Path of a file shipped in ``nhmsar/data``."""
    return Path(str(resources.files("nhmsar") / "data" / name))
