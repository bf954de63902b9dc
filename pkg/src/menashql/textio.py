"""Section-based text format shared by game files and learner checkpoints.

Layout::

    schema_version: 1
    kind: <what the file holds>
    <key>: <value>
    ...
    [<table name>] dtype=float shape=3,2,2
    <rows of the last axis, whitespace separated>

Reals are written as ``% .16e`` with the exponent padded to three digits
(17 significant digits, fixed width of 24 characters) so a file round-trips
bit-exactly and its size depends only on table shapes.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
INT_WIDTH = 20


class FormatError(ValueError):
    pass


def fmt_float(v: float) -> str:
    text = f"{v: .16e}"
    mant, sep, exp = text.partition("e")
    if not sep:  # nan or inf
        return text.rjust(24)
    return f"{mant}e{exp[0]}{exp[1:].zfill(3)}"


def _fmt_row(row: np.ndarray, dtype: str) -> str:
    if dtype == "float":
        return " ".join(fmt_float(v) for v in row.tolist())
    if dtype == "int":
        return " ".join(f"{v:{INT_WIDTH}d}" for v in row.tolist())
    return " ".join("1" if v else "0" for v in row.tolist())


def dumps(kind: str, header: dict, tables: dict[str, np.ndarray]) -> str:
    out = io.StringIO()
    out.write(f"schema_version: {SCHEMA_VERSION}\n")
    out.write(f"kind: {kind}\n")
    for key, value in header.items():
        out.write(f"{key}: {value}\n")
    for name, arr in tables.items():
        arr = np.asarray(arr)
        if arr.dtype == bool:
            dtype = "bool"
        elif np.issubdtype(arr.dtype, np.integer):
            dtype = "int"
        else:
            dtype = "float"
        shape = ",".join(str(d) for d in arr.shape)
        out.write(f"[{name}] dtype={dtype} shape={shape}\n")
        flat = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in flat:
            out.write(_fmt_row(row, dtype) + "\n")
    return out.getvalue()


def loads(text: str, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    lines = text.splitlines()
    header: dict[str, str] = {}
    tables: dict[str, np.ndarray] = {}
    i = 0
    while i < len(lines) and not lines[i].startswith("["):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"line {i}: expected 'key: value', got {line!r}")
        header[key.strip()] = value.strip()
    if header.get("schema_version") != str(SCHEMA_VERSION):
        raise FormatError(f"unsupported schema_version {header.get('schema_version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected kind {kind!r}, found {header.get('kind')!r}")
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line.strip():
            continue
        if not line.startswith("["):
            raise FormatError(f"line {i}: expected a table header")
        name, _, rest = line[1:].partition("]")
        try:
            meta = dict(part.split("=", 1) for part in rest.split())
            shape = tuple(int(d) for d in meta["shape"].split(",")) if meta["shape"] else ()
            dtype = meta["dtype"]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"line {i}: malformed table header {line!r}") from exc
        ncols = shape[-1] if shape else 1
        nrows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        if i + nrows > len(lines):
            raise FormatError(f"table {name!r} is truncated")
        values = " ".join(lines[i:i + nrows]).split()
        i += nrows
        if len(values) != nrows * ncols:
            raise FormatError(f"table {name!r}: expected {nrows * ncols} values, got {len(values)}")
        try:
            if dtype == "float":
                arr = np.array([float(v) for v in values], dtype=np.float64)
            elif dtype == "int":
                arr = np.array([int(v) for v in values], dtype=np.int64)
            elif dtype == "bool":
                arr = np.array([v == "1" for v in values], dtype=bool)
            else:
                raise FormatError(f"table {name!r}: unknown dtype {dtype!r}")
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"table {name!r}: {exc}") from exc
        tables[name] = arr.reshape(shape)
    return header, tables


def write(path, kind: str, header: dict, tables: dict[str, np.ndarray]) -> None:
    Path(path).write_text(dumps(kind, header, tables))


def read(path, kind: str | None = None):
    return loads(Path(path).read_text(), kind)
