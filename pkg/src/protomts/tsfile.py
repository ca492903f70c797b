"""Reader and writer for the UEA/sktime ``.ts`` text format (equal-length, labeled).

Layout::

    # comment
    @problemName Epilepsy
    @univariate false
    @dimensions 3
    @equalLength true
    @seriesLength 206
    @classLabel true EPILEPSY WALKING RUNNING SAWING
    @data
    v,v,...,v:v,v,...,v:v,v,...,v:LABEL

Directive keys are case-insensitive. Labels are mapped to integers in the
order they are declared by ``@classLabel``.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import DataError, ParseError

_BOOL = {"true": True, "false": False}


@dataclass
class TsHeader:
    problem_name: str = "dataset"
    dimensions: int | None = None
    series_length: int | None = None
    class_labels: list[str] = field(default_factory=list)
    equal_length: bool = True
    univariate: bool | None = None
    timestamps: bool = False
    has_class_label: bool = False


def _parse_bool(value: str, key: str, lineno: int) -> bool:
    try:
        return _BOOL[value.strip().lower()]
    except KeyError:
        raise ParseError(f"@{key} expects true or false, got {value!r}", lineno) from None


def _parse_int(value: str, key: str, lineno: int) -> int:
    try:
        out = int(value.strip())
    except ValueError:
        raise ParseError(f"@{key} expects an integer, got {value!r}", lineno) from None
    if out < 1:
        raise ParseError(f"@{key} must be positive, got {out}", lineno)
    return out


def _header_line(header: TsHeader, line: str, lineno: int) -> None:
    parts = line[1:].split(None, 1)
    if not parts:
        raise ParseError("empty header directive", lineno)
    key, rest = parts[0], (parts[1] if len(parts) > 1 else "")
    key_l = key.lower()
    rest = rest.strip()
    if key_l == "problemname":
        header.problem_name = rest
    elif key_l in ("timestamps",):
        header.timestamps = _parse_bool(rest, key, lineno)
        if header.timestamps:
            raise ParseError("timestamped series are not supported", lineno)
    elif key_l == "missing":
        _parse_bool(rest, key, lineno)
    elif key_l == "univariate":
        header.univariate = _parse_bool(rest, key, lineno)
    elif key_l in ("dimension", "dimensions"):
        header.dimensions = _parse_int(rest, key, lineno)
    elif key_l == "equallength":
        header.equal_length = _parse_bool(rest, key, lineno)
    elif key_l == "serieslength":
        header.series_length = _parse_int(rest, key, lineno)
    elif key_l in ("classlabel", "class_label"):
        tokens = rest.split()
        if not tokens:
            raise ParseError("@classLabel needs true/false", lineno)
        header.has_class_label = _parse_bool(tokens[0], key, lineno)
        if header.has_class_label:
            header.class_labels = tokens[1:]
            if not header.class_labels:
                raise ParseError("@classLabel true must list at least one label", lineno)
            if len(set(header.class_labels)) != len(header.class_labels):
                raise ParseError("@classLabel lists a label twice", lineno)
    elif key_l in ("targetlabel", "dimensions_names"):
        pass
    else:
        raise ParseError(f"unknown header directive @{key}", lineno)


def _parse_values(field_text: str, lineno: int, col0: int) -> list[float]:
    out = []
    col = col0
    for token in field_text.split(","):
        stripped = token.strip()
        try:
            value = float(stripped)
        except ValueError:
            lead = len(token) - len(token.lstrip())
            raise ParseError(f"non-numeric value {stripped!r}", lineno, col + lead) from None
        if not np.isfinite(value):
            lead = len(token) - len(token.lstrip())
            raise ParseError(f"non-finite value {stripped!r}", lineno, col + lead)
        out.append(value)
        col += len(token) + 1
    return out


def parse_ts(source) -> Dataset:
    """Parse ``.ts`` text (a string, a path-like, or a text stream) into a Dataset.

    Errors carry 1-based line numbers, and a 1-based column for bad values.
    """
    if isinstance(source, os.PathLike):
        with open(source, encoding="utf-8") as fh:
            return parse_ts(fh)
    if isinstance(source, str):
        source = io.StringIO(source)

    header = TsHeader()
    in_data = False
    label_index: dict[str, int] = {}
    rows: list[np.ndarray] = []
    labels: list[int] = []
    n_dims: int | None = None
    length: int | None = None
    lineno = 0

    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@"):
            if in_data:
                raise ParseError("header directive after @data", lineno)
            if line[1:].strip().lower() == "data":
                in_data = True
                if not header.has_class_label:
                    raise ParseError("unlabelled data is not supported; @classLabel true is required", lineno)
                label_index = {lab: i for i, lab in enumerate(header.class_labels)}
                n_dims = header.dimensions
                if header.univariate and n_dims is None:
                    n_dims = 1
                if header.univariate and n_dims not in (None, 1):
                    raise ParseError("@univariate true contradicts @dimensions", lineno)
                length = header.series_length
                continue
            _header_line(header, line, lineno)
            continue
        if not in_data:
            raise ParseError("data line before @data", lineno)

        fields = line.split(":")
        if len(fields) < 2:
            raise ParseError("data line has no class label field", lineno)
        *dims, label = fields
        label = label.strip()
        if n_dims is None:
            n_dims = len(dims)
        if len(dims) != n_dims:
            raise ParseError(f"expected {n_dims} dimensions, found {len(dims)}", lineno)
        series = []
        col = 1 + (len(raw) - len(raw.lstrip()))
        for dim_text in dims:
            values = _parse_values(dim_text, lineno, col)
            col += len(dim_text) + 1
            if length is None:
                length = len(values)
            if len(values) != length:
                raise ParseError(
                    f"series length {len(values)} differs from expected {length}; unequal lengths are unsupported",
                    lineno,
                )
            series.append(values)
        if label not in label_index:
            raise ParseError(f"unknown class label {label!r}", lineno)
        rows.append(np.array(series, dtype=np.float64))
        labels.append(label_index[label])

    if not in_data:
        raise ParseError("missing @data section", lineno + 1)
    d = n_dims if n_dims is not None else 1
    n = length if length is not None else 0
    X = np.stack(rows) if rows else np.zeros((0, d, n))
    return Dataset(X, np.array(labels, dtype=np.int64), list(header.class_labels), name=header.problem_name)


def load_ts(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_ts(fh)


def format_number(value: float) -> str:
    """Shortest decimal that round-trips to the same float64."""
    return repr(float(value))


def write_ts(data: Dataset, sink) -> None:
    """Write ``data`` as ``.ts`` text to a path (str or PathLike) or a text stream."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            write_ts(data, fh)
        return
    for name in data.class_names:
        if not name or any(ch.isspace() or ch in ":," for ch in name):
            raise DataError(f"class name {name!r} cannot be written to a .ts file")
    d = data.d
    sink.write(f"@problemName {data.name}\n")
    sink.write("@timeStamps false\n")
    sink.write("@missing false\n")
    sink.write(f"@univariate {'true' if d == 1 else 'false'}\n")
    sink.write(f"@dimensions {d}\n")
    sink.write("@equalLength true\n")
    if data.n > 0:
        sink.write(f"@seriesLength {data.n}\n")
    sink.write("@classLabel true " + " ".join(data.class_names) + "\n")
    sink.write("@data\n")
    for x, label in zip(data.X, data.y):
        dims = [",".join(format_number(v) for v in row) for row in x]
        sink.write(":".join(dims) + ":" + data.class_names[label] + "\n")
