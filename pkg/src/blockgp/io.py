"""CSV and JSON readers/writers. Floats are written in their shortest
round-trip form, so files read back exactly and reruns compare byte for byte."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .gp import Dataset, FittedModel
from .kernel import ValidationError


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(csv_text(header, rows))


def read_table(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    try:
        data = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as err:
        raise ValidationError(f"{path}: non-numeric entry ({err})") from None
    if data.size and data.shape[1] != len(header):
        raise ValidationError(f"{path}: rows do not match the header width")
    return header, data.reshape(-1, len(header))


def _x_columns(header: list[str], path) -> list[int]:
    cols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
    if not cols:
        raise ValidationError(f"{path}: no x1..xp columns in header {header}")
    return cols


def read_dataset(path) -> Dataset:
    """Dataset CSV with columns ``x1..xp,y`` and an optional ``slice``."""
    header, data = read_table(path)
    if "y" not in header:
        raise ValidationError(f"{path}: missing 'y' column")
    X = data[:, _x_columns(header, path)]
    y = data[:, header.index("y")]
    labels = data[:, header.index("slice")].astype(np.int64) if "slice" in header else None
    return Dataset(X, y, labels)


def write_dataset(path, ds: Dataset) -> None:
    header = [f"x{j + 1}" for j in range(ds.p)] + ["y"]
    rows = [[*map(float, x), float(y)] for x, y in zip(ds.X, ds.y)]
    if ds.slice_of is not None:
        header.append("slice")
        for row, s in zip(rows, ds.slice_of):
            row.append(int(s))
    write_csv(path, header, rows)


def read_points(path) -> np.ndarray:
    header, data = read_table(path)
    return data[:, _x_columns(header, path)]


def write_points(path, X: np.ndarray, extra: Optional[dict] = None) -> None:
    X = np.atleast_2d(X)
    header = [f"x{j + 1}" for j in range(X.shape[1])]
    cols = [X]
    for name, vals in (extra or {}).items():
        header.append(name)
        cols.append(np.asarray(vals)[:, None])
    write_csv(path, header, np.hstack(cols).tolist())


def prediction_rows(X: np.ndarray, mean: np.ndarray, sd: np.ndarray):
    for x, m, s in zip(np.atleast_2d(X), mean, sd):
        yield [*map(float, x), float(m), float(s), float(m - 3 * s), float(m + 3 * s)]


def write_predictions(path, X: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> None:
    """Columns ``x1..xp,mean,sd,lo3,hi3`` with 3-sigma bands."""
    X = np.atleast_2d(X)
    header = [f"x{j + 1}" for j in range(X.shape[1])] + ["mean", "sd", "lo3", "hi3"]
    write_csv(path, header, prediction_rows(X, mean, sd))


def _emit(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_emit(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_emit(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + _emit(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON text with round-trip floats and non-finite values as null."""
    return _emit(obj, indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}: invalid JSON ({err})") from None


def save_model(path, model: FittedModel, timing: bool = True) -> None:
    write_json(path, model.to_dict(timing=timing))


def load_model(path) -> FittedModel:
    return FittedModel.from_dict(read_json(path))
