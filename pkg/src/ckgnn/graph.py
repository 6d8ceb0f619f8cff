"""Sparse graph storage and the fixed GCN aggregation operator.

Matrices are square CSR with float64 values. Construction validates the
layout once; afterwards the arrays are marked read-only so a matrix can be
shared between models, kernels and attention heads without copying.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

PSD_TOL = 1e-8
MAX_DENSE_EIG_N = 2000


class GraphError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Square CSR matrix. ``symmetric`` is checked bit-exactly when set."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    symmetric: bool = False
    _rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        col_idx = np.asarray(self.col_idx, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        n = int(self.n)
        if n < 0 or row_ptr.shape != (n + 1,):
            raise GraphError(f"row_ptr must have length n+1={n + 1}")
        if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0):
            raise GraphError("row_ptr must start at 0 and be non-decreasing")
        nnz = int(row_ptr[-1])
        if col_idx.shape != (nnz,) or values.shape != (nnz,):
            raise GraphError(f"expected {nnz} stored entries")
        if nnz and (col_idx.min() < 0 or col_idx.max() >= n):
            raise GraphError("column index out of range")
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(row_ptr))
        if nnz > 1:
            same_row = rows[1:] == rows[:-1]
            if np.any(same_row & (col_idx[1:] <= col_idx[:-1])):
                raise GraphError("column indices must be strictly increasing within a row")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "row_ptr", _readonly(row_ptr))
        object.__setattr__(self, "col_idx", _readonly(col_idx))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "_rows", _readonly(rows))
        if self.symmetric:
            perm = self.transpose_perm()
            if perm is None or not np.array_equal(values[perm], values):
                raise GraphError("matrix flagged symmetric is not symmetric")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_triplets(cls, n: int, rows, cols, values, symmetric: bool = False) -> "SparseMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if rows.size and (rows.min() < 0 or rows.max() >= n):
            raise GraphError("row index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(dup):
                k = int(np.argmax(dup))
                raise GraphError(f"duplicate entry ({rows[k]}, {cols[k]})")
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(row_ptr, rows + 1, 1)
        return cls(n, np.cumsum(row_ptr), cols, values, symmetric=symmetric)

    @classmethod
    def from_dense(cls, a, symmetric: bool = False) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"expected a square matrix, got shape {a.shape}")
        rows, cols = np.nonzero(a)
        return cls.from_triplets(a.shape[0], rows, cols, a[rows, cols], symmetric=symmetric)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, np.arange(n + 1), np.arange(n), np.ones(n), symmetric=True)

    def with_values(self, values, symmetric: bool | None = None) -> "SparseMatrix":
        """Same pattern, new values."""
        sym = self.symmetric if symmetric is None else symmetric
        return SparseMatrix(self.n, self.row_ptr, self.col_idx, values, symmetric=sym)

    # -- queries ----------------------------------------------------------

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def rows(self) -> np.ndarray:
        """Row index of every stored entry."""
        return self._rows

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self._rows, self.col_idx] = self.values
        return out

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    def same_pattern(self, other: "SparseMatrix") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    def transpose_perm(self) -> np.ndarray | None:
        """Index map p with entry k of the transpose stored at p[k], or None
        if the pattern is not structurally symmetric."""
        key = self._rows * self.n + self.col_idx
        tkey = self.col_idx * self.n + self._rows
        pos = np.searchsorted(key, tkey)
        pos = np.minimum(pos, max(self.nnz - 1, 0))
        if self.nnz and not np.array_equal(key[pos], tkey):
            return None
        return pos

    def diagonal_positions(self) -> np.ndarray:
        return np.flatnonzero(self._rows == self.col_idx)

    def row_sums(self) -> np.ndarray:
        return np.bincount(self._rows, weights=self.values, minlength=self.n).astype(np.float64)


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph without self-loops."""

    n: int
    edges: tuple[tuple[int, int, float], ...]

    def __init__(self, n: int, edges: Iterable[Sequence]):
        seen: set[tuple[int, int]] = set()
        clean = []
        for e in edges:
            i, j = int(e[0]), int(e[1])
            w = float(e[2]) if len(e) > 2 else 1.0
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={n}")
            if i == j:
                raise GraphError(f"self-loop on node {i} in raw input")
            if not (w > 0 and np.isfinite(w)):
                raise GraphError(f"edge ({i}, {j}) has non-positive weight {w}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
            clean.append((key[0], key[1], w))
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "edges", tuple(clean))

    def adjacency(self) -> SparseMatrix:
        if not self.edges:
            return SparseMatrix(self.n, np.zeros(self.n + 1, dtype=np.int64), [], [], symmetric=True)
        e = np.array(self.edges, dtype=np.float64)
        i, j, w = e[:, 0].astype(np.int64), e[:, 1].astype(np.int64), e[:, 2]
        return SparseMatrix.from_triplets(
            self.n, np.concatenate([i, j]), np.concatenate([j, i]), np.concatenate([w, w]),
            symmetric=True,
        )


def add_self_loops(a: SparseMatrix) -> SparseMatrix:
    """Return A + I. Rejects matrices that already store a diagonal entry."""
    if not a.symmetric:
        raise GraphError("add_self_loops expects a symmetric adjacency matrix")
    if a.diagonal_positions().size:
        raise GraphError("diagonal entries already present (self-loops added twice?)")
    idx = np.arange(a.n)
    return SparseMatrix.from_triplets(
        a.n,
        np.concatenate([a.rows, idx]),
        np.concatenate([a.col_idx, idx]),
        np.concatenate([a.values, np.ones(a.n)]),
        symmetric=True,
    )


def degree_vector(a_tilde: SparseMatrix) -> np.ndarray:
    return a_tilde.row_sums()


def symmetric_normalize(a_tilde: SparseMatrix) -> SparseMatrix:
    """D^-1/2 A D^-1/2 on the stored pattern."""
    d = degree_vector(a_tilde)
    if np.any(d <= 0):
        raise GraphError(f"zero row sum at node {int(np.argmax(d <= 0))}")
    vals = a_tilde.values / np.sqrt(d[a_tilde.rows] * d[a_tilde.col_idx])
    return a_tilde.with_values(vals)


def normalized_adjacency(graph: Graph) -> SparseMatrix:
    return symmetric_normalize(add_self_loops(graph.adjacency()))


def spmm(s: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """S @ X with fixed per-row accumulation order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != s.n:
        raise GraphError(f"cannot multiply {s.n}x{s.n} sparse by {x.shape}")
    return np.asarray(s.to_scipy() @ x)


@dataclass(frozen=True)
class PSDReport:
    min_eig_S: float
    min_eig_I_minus_S: float
    passes: bool
    n: int


def check_psd_decomposition(s: SparseMatrix, tol: float = PSD_TOL) -> PSDReport:
    """Check that S = I - (I - S) splits into two PSD kernel matrices."""
    if s.n > MAX_DENSE_EIG_N:
        raise GraphError(f"n={s.n} exceeds the dense eigensolver guard ({MAX_DENSE_EIG_N})")
    dense = s.to_dense()
    if not np.array_equal(dense, dense.T):
        raise GraphError("check_psd_decomposition needs a symmetric matrix")
    if s.n == 0:
        return PSDReport(0.0, 0.0, True, 0)
    eig_s = np.linalg.eigvalsh(dense)
    eig_rest = np.linalg.eigvalsh(np.eye(s.n) - dense)
    lo = float(eig_rest[0])
    return PSDReport(float(eig_s[0]), lo, lo >= -tol, s.n)
