"""Files for external plotting: the reordered co-cluster matrix and the
per-row / per-column latent coordinates."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .data import DataMatrix, atomic_write, save_matrix
from .gmm import GaussianMixture, responsibilities
from .side import SideVae, cluster_assign, encode


@dataclass
class CoclusterExport:
    row_order: np.ndarray       # new position -> original row
    col_order: np.ndarray
    row_bounds: List[Tuple[int, int, int]]   # (cluster, start, stop)
    col_bounds: List[Tuple[int, int, int]]
    matrix_path: str
    boundaries_path: str
    permutation_path: str


def block_order(labels) -> np.ndarray:
    """Indices sorted by (label, original index)."""
    labels = np.asarray(labels)
    return np.lexsort((np.arange(labels.size), labels))


def _bounds(sorted_labels):
    out, start = [], 0
    for k in range(1, sorted_labels.size + 1):
        if k == sorted_labels.size or sorted_labels[k] != sorted_labels[start]:
            out.append((int(sorted_labels[start]), start, k))
            start = k
    return out


def companion_paths(out_path) -> Tuple[str, str]:
    stem, _ = os.path.splitext(os.fspath(out_path))
    return stem + ".boundaries.csv", stem + ".permutation.csv"


def reorder(matrix: DataMatrix, row_order, col_order) -> DataMatrix:
    ix = np.ix_(row_order, col_order)
    rl = None if matrix.row_labels is None else [matrix.row_labels[i] for i in row_order]
    cl = None if matrix.col_labels is None else [matrix.col_labels[j] for j in col_order]
    return DataMatrix(matrix.values[ix], matrix.mask[ix], rl, cl)


def restore_order(matrix: DataMatrix, row_order, col_order) -> DataMatrix:
    """Inverse of ``reorder``."""
    return reorder(matrix, np.argsort(row_order), np.argsort(col_order))


def export_cocluster(matrix: DataMatrix, row_labels, col_labels, out_path) -> CoclusterExport:
    row_labels, col_labels = np.asarray(row_labels), np.asarray(col_labels)
    if row_labels.size != matrix.n or col_labels.size != matrix.d:
        raise ValueError("need one label per row and per column")
    ro, co = block_order(row_labels), block_order(col_labels)
    rb, cb = _bounds(row_labels[ro]), _bounds(col_labels[co])
    save_matrix(out_path, reorder(matrix, ro, co))
    bpath, ppath = companion_paths(out_path)

    def write_bounds(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "cluster", "start", "stop"])
        w.writerows([("row", *b) for b in rb] + [("column", *b) for b in cb])

    def write_perm(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "new", "old"])
        w.writerows([("row", k, int(i)) for k, i in enumerate(ro)])
        w.writerows([("column", k, int(j)) for k, j in enumerate(co)])

    atomic_write(bpath, write_bounds)
    atomic_write(ppath, write_perm)
    return CoclusterExport(ro, co, rb, cb, os.fspath(out_path), bpath, ppath)


def load_permutation(path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        records = list(csv.DictReader(fh))
    orders = {}
    for axis in ("row", "column"):
        recs = sorted((int(r["new"]), int(r["old"])) for r in records if r["axis"] == axis)
        orders[axis] = np.array([old for _, old in recs], dtype=np.int64)
    return orders["row"], orders["column"]


@dataclass
class Embedding:
    coords: np.ndarray
    gamma: np.ndarray

    @property
    def labels(self):
        return np.argmax(self.gamma, axis=1)


def side_embedding(vae: SideVae, x) -> Embedding:
    return Embedding(encode(vae, x).mu_raw, cluster_assign(vae, x))


def feature_only_row_embedding(col_vae: SideVae, inputs, mask, mixture: GaussianMixture):
    emb = encode(col_vae, inputs.T).mu_raw
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    feats = (np.where(mask, inputs, 0.0) @ emb) / counts
    return Embedding(feats, responsibilities(mixture, feats))


def _format_records(side: str, emb: Embedding) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    L, k = emb.coords.shape[1], emb.gamma.shape[1]
    w.writerow(["side", "index", "label"] + [f"z{i}" for i in range(L)]
               + [f"p{c}" for c in range(k)])
    for i, (z, g) in enumerate(zip(emb.coords, emb.gamma)):
        w.writerow([side, i, int(np.argmax(g))] + [repr(float(v)) for v in z]
                   + [repr(float(v)) for v in g])
    return buf.getvalue()


def export_embeddings(row: Embedding, col: Embedding, out_path) -> Tuple[str, str]:
    """Writes ``<stem>.rows.csv`` and ``<stem>.columns.csv``: unscaled
    posterior means, hard label and membership vector per record."""
    stem, _ = os.path.splitext(os.fspath(out_path))
    paths = (stem + ".rows.csv", stem + ".columns.csv")
    atomic_write(paths[0], _format_records("row", row))
    atomic_write(paths[1], _format_records("column", col))
    return paths


def read_embeddings(path) -> Embedding:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    zi = [k for k, h in enumerate(header) if h.startswith("z")]
    pi = [k for k, h in enumerate(header) if h.startswith("p")]
    data = np.array([[float(r[k]) for k in zi + pi] for r in body]).reshape(len(body), -1)
    return Embedding(data[:, :len(zi)], data[:, len(zi):])
