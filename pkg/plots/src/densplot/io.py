"""Readers for the delimited outputs of the densprop CLI.

Both readers validate fully before any figure is created, so a malformed
input can never leave a partial image behind. Input files are opened
read-only and never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRID_FORMAT = "densprop-grid-1"


class InputFormatError(ValueError):
    """Malformed input table; message carries file and line."""


@dataclass
class ErrorCurve:
    label: str
    times: np.ndarray
    nrmse: np.ndarray


@dataclass
class GridPanel:
    t: float
    kind: str
    xaxis: str
    yaxis: str
    x_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray
    reduced: str


def read_error_table(path, label=None) -> ErrorCurve:
    """Parse a `t,nrmse` table; NaN entries mark undefined snapshots."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "t,nrmse":
        raise InputFormatError(f"{path}:1: expected header 't,nrmse'")
    if len(lines) == 1:
        raise InputFormatError(f"{path}: table has no data rows")
    times, errs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        toks = line.split(",")
        if len(toks) != 2:
            raise InputFormatError(f"{path}:{lineno}: expected 2 columns")
        try:
            times.append(float(toks[0]))
            errs.append(float(toks[1]))
        except ValueError:
            raise InputFormatError(
                f"{path}:{lineno}: non-numeric entry {line!r}") from None
    if label is None:
        label = path_stem(path)
    return ErrorCurve(label, np.array(times), np.array(errs))


def read_grid(path) -> GridPanel:
    """Parse a density-grid file: '#' key = value headers, then the matrix."""
    header = {}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, eq, value = line[1:].partition("=")
                if not eq:
                    raise InputFormatError(f"{path}:{lineno}: malformed header line")
                header[key.strip()] = value.strip()
            else:
                try:
                    rows.append([float(tok) for tok in line.split(",")])
                except ValueError:
                    raise InputFormatError(
                        f"{path}:{lineno}: non-numeric matrix row") from None
    if header.get("format") != GRID_FORMAT:
        raise InputFormatError(f"{path}: not a {GRID_FORMAT} file")
    for key in ("t", "xaxis", "yaxis", "xgrid", "ygrid", "kind"):
        if key not in header:
            raise InputFormatError(f"{path}: missing header key {key!r}")
    x_grid = np.array([float(v) for v in header["xgrid"].split(",")])
    y_grid = np.array([float(v) for v in header["ygrid"].split(",")])
    values = np.array(rows, dtype=float)
    if values.shape != (len(x_grid), len(y_grid)):
        raise InputFormatError(
            f"{path}: matrix is {values.shape}, expected "
            f"({len(x_grid)}, {len(y_grid)})")
    if np.any(values < 0):
        raise InputFormatError(f"{path}: negative density values")
    return GridPanel(t=float(header["t"]), kind=header["kind"],
                     xaxis=header["xaxis"], yaxis=header["yaxis"],
                     x_grid=x_grid, y_grid=y_grid, values=values,
                     reduced=header.get("reduced", ""))


def path_stem(path) -> str:
    name = str(path).replace("\\", "/").rsplit("/", 1)[-1]
    return name.rsplit(".", 1)[0]
