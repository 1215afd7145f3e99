"""Matrix container, CSV ingestion, preprocessing and the synthetic
checkerboard generator."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (DataError, DimensionError, EmptyFileError, NonNumericError,
                     RaggedRowsError)

FORMATS = ("csv_dense", "labeled_csv")
PREPROCESS = ("none", "minmax01", "tfidf_l2")


@dataclass
class DataMatrix:
    values: np.ndarray
    mask: np.ndarray
    row_labels: Optional[Sequence[str]] = None
    col_labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.mask.shape != self.values.shape:
            raise DimensionError(f"mask {self.mask.shape} must match values {self.values.shape}")
        if self.row_labels is not None and len(self.row_labels) != self.n:
            raise DimensionError("one row label per row required")
        if self.col_labels is not None and len(self.col_labels) != self.d:
            raise DimensionError("one column label per column required")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise DataError("observed entries must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def observed(self) -> np.ndarray:
        return self.values[self.mask]

    def masked_values(self) -> np.ndarray:
        """Values with missing entries set to NaN."""
        return np.where(self.mask, self.values, np.nan)


def _parse_cell(text: str, r: int, c: int) -> float:
    text = text.strip()
    if text == "":
        return np.nan
    try:
        v = float(text)
    except ValueError:
        raise NonNumericError(f"non-numeric cell {text!r} at row {r + 1}, column {c + 1}") from None
    if not np.isfinite(v):
        raise NonNumericError(f"non-finite cell {text!r} at row {r + 1}, column {c + 1}")
    return v


def parse_matrix(text: str, fmt: str = "csv_dense") -> DataMatrix:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    rows = [r for r in csv.reader(io.StringIO(text)) if r]  # blank lines only; ',,' is a row
    if not rows:
        raise EmptyFileError("no data rows")
    row_labels = col_labels = None
    if fmt == "labeled_csv":
        col_labels = [f.strip() for f in rows[0][1:]]
        rows = rows[1:]
        if not rows:
            raise EmptyFileError("labeled file has a header but no data rows")
        row_labels = [r[0].strip() for r in rows]
        rows = [r[1:] for r in rows]
    width = len(rows[0])
    for k, r in enumerate(rows):
        if len(r) != width:
            raise RaggedRowsError(f"row {k + 1} has {len(r)} fields, expected {width}")
    if width == 0:
        raise EmptyFileError("no data columns")
    values = np.array([[_parse_cell(f, i, j) for j, f in enumerate(r)]
                       for i, r in enumerate(rows)])
    mask = ~np.isnan(values)
    return DataMatrix(np.where(mask, values, 0.0), mask, row_labels, col_labels)


def load_matrix(path, fmt: str = "csv_dense") -> DataMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_matrix(fh.read(), fmt)


def atomic_write(path, data, mode: str = "w"):
    """Write to a temporary sibling file and rename it into place."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        kwargs = {"encoding": "utf-8", "newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            if callable(data):
                data(fh)
            else:
                fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_matrix(matrix: DataMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    labeled = matrix.row_labels is not None or matrix.col_labels is not None
    if labeled:
        cols = matrix.col_labels or [str(j) for j in range(matrix.d)]
        w.writerow([""] + list(cols))
    rlabels = matrix.row_labels or [str(i) for i in range(matrix.n)]
    for i in range(matrix.n):
        cells = [repr(float(v)) if ok else "" for v, ok in zip(matrix.values[i], matrix.mask[i])]
        w.writerow(([rlabels[i]] if labeled else []) + cells)
    return buf.getvalue()


def save_matrix(path, matrix: DataMatrix) -> None:
    """CSV with empty cells for missing entries; labeled when labels exist."""
    atomic_write(path, format_matrix(matrix))


def preprocess(matrix: DataMatrix, mode: str = "none") -> DataMatrix:
    if mode not in PREPROCESS:
        raise ValueError(f"preprocess mode must be one of {PREPROCESS}")
    if mode == "none":
        return replace(matrix, values=matrix.values.copy())
    obs = matrix.observed()
    if mode == "minmax01":
        lo, hi = obs.min(), obs.max()
        if hi <= lo:
            raise DataError("minmax01 needs a non-constant matrix")
        vals = np.clip((matrix.values - lo) / (hi - lo), 0.0, 1.0)
        return replace(matrix, values=np.where(matrix.mask, vals, 0.0))
    if np.any(obs < 0):
        raise DataError("tfidf_l2 needs nonnegative counts")
    counts = np.where(matrix.mask, matrix.values, 0.0)
    df = np.sum(counts > 0, axis=0)
    idf = np.log(matrix.n / (1.0 + df))
    w = counts * idf
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    w = np.divide(w, norms, out=np.zeros_like(w), where=norms > 0)
    return replace(matrix, values=w)


@dataclass
class SyntheticSpec:
    n: int
    d: int
    g: int
    m: int
    separation: float = 1.0
    noise_level: float = 0.0
    missing_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.g <= self.n or not 1 <= self.m <= self.d:
            raise ValueError("need 1 <= g <= n and 1 <= m <= d")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must lie in [0, 1)")
        if self.separation <= 0:
            raise ValueError("separation must be positive")


def synth_checkerboard(spec: SyntheticSpec) -> Tuple[DataMatrix, np.ndarray, np.ndarray]:
    """Shuffled block matrix and the post-shuffle row / column block labels.

    Each of the g x m blocks gets a distinct level from the grid
    ``separation * {0, ..., g*m - 1}``.
    """
    rng = np.random.default_rng(spec.seed)
    rl = np.arange(spec.n) % spec.g
    cl = np.arange(spec.d) % spec.m
    levels = spec.separation * rng.permutation(spec.g * spec.m).reshape(spec.g, spec.m)
    X = levels[rl][:, cl] + spec.noise_level * spec.separation * rng.standard_normal((spec.n, spec.d))
    mask = rng.random((spec.n, spec.d)) >= spec.missing_fraction
    pr, pc = rng.permutation(spec.n), rng.permutation(spec.d)
    X, mask = X[pr][:, pc], mask[pr][:, pc]
    return DataMatrix(np.where(mask, X, 0.0), mask), rl[pr], cl[pc]
