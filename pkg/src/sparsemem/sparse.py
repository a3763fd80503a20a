"""Sparse vector / sparse row-matrix kernels used by the memory core.

All numeric state is real64. Sparse vectors keep their index arrays
sorted ascending and never store explicit zeros, which makes equality,
serialization and merging deterministic. These are value types: no
operation here mutates an input unless the name says so (row_zero,
sparse_outer_add mutate the dense matrix they are given).
"""

from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


def _as_f8(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


class SparseVector:
    """Sorted (index, value) pairs over a fixed-dimension dense space."""

    __slots__ = ("dim", "idx", "val")

    def __init__(self, dim: int, idx=None, val=None, *, checked: bool = True):
        self.dim = int(dim)
        if idx is None:
            self.idx = np.empty(0, dtype=np.int64)
            self.val = np.empty(0, dtype=np.float64)
            return
        idx = np.asarray(idx, dtype=np.int64)
        val = _as_f8(val)
        if checked:
            if idx.shape != val.shape or idx.ndim != 1:
                raise ContractViolation("index/value shape mismatch")
            if idx.size:
                if idx.min() < 0 or idx.max() >= self.dim:
                    raise ContractViolation("index out of range")
                order = np.argsort(idx, kind="stable")
                idx = idx[order]
                val = val[order]
                if np.any(idx[1:] == idx[:-1]):
                    raise ContractViolation("duplicate indices")
            keep = val != 0.0
            if not keep.all():
                idx = idx[keep]
                val = val[keep]
        self.idx = idx
        self.val = val

    @classmethod
    def empty(cls, dim: int) -> "SparseVector":
        return cls(dim)

    @classmethod
    def one_hot(cls, dim: int, i: int, value: float = 1.0) -> "SparseVector":
        if not 0 <= i < dim:
            raise ContractViolation("one_hot index out of range")
        if value == 0.0:
            return cls(dim)
        return cls(dim, np.array([i], dtype=np.int64), np.array([value]), checked=False)

    @classmethod
    def from_dense(cls, v: np.ndarray) -> "SparseVector":
        v = _as_f8(v)
        idx = np.flatnonzero(v).astype(np.int64)
        return cls(v.shape[0], idx, v[idx], checked=False)

    @property
    def nnz(self) -> int:
        return self.idx.size

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.idx] = self.val
        return out

    def copy(self) -> "SparseVector":
        return SparseVector(self.dim, self.idx.copy(), self.val.copy(), checked=False)

    def scaled(self, c: float) -> "SparseVector":
        if c == 0.0:
            return SparseVector(self.dim)
        return SparseVector(self.dim, self.idx, self.val * c, checked=False)

    def sum(self) -> float:
        return float(self.val.sum())

    def get(self, i: int) -> float:
        j = np.searchsorted(self.idx, i)
        if j < self.idx.size and self.idx[j] == i:
            return float(self.val[j])
        return 0.0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseVector)
            and self.dim == other.dim
            and np.array_equal(self.idx, other.idx)
            and np.array_equal(self.val, other.val)
        )

    def __repr__(self) -> str:
        pairs = ", ".join(f"{i}:{v:g}" for i, v in zip(self.idx, self.val))
        return f"SparseVector(dim={self.dim}, {{{pairs}}})"


def sparse_combine(parts: list[tuple[float, SparseVector]], dim: int) -> SparseVector:
    """Linear combination sum(c * v) with a merged, compacted support."""
    idxs = [v.idx for c, v in parts if c != 0.0 and v.nnz]
    if not idxs:
        return SparseVector(dim)
    union = np.unique(np.concatenate(idxs))
    acc = np.zeros(union.size)
    for c, v in parts:
        if c == 0.0 or v.nnz == 0:
            continue
        pos = np.searchsorted(union, v.idx)
        np.add.at(acc, pos, c * v.val)
    keep = acc != 0.0
    return SparseVector(dim, union[keep], acc[keep], checked=False)


def truncate_top_k(v: SparseVector, k: int) -> SparseVector:
    """Keep the k largest values; ties resolved toward lower indices."""
    if v.nnz <= k:
        return v
    order = np.lexsort((v.idx, -v.val))[:k]
    order.sort()
    return SparseVector(v.dim, v.idx[order], v.val[order], checked=False)


def renormalized(v: SparseVector) -> SparseVector:
    s = v.val.sum()
    if s == 0.0:
        return v
    return SparseVector(v.dim, v.idx, v.val / s, checked=False)


def sparse_weighted_sum(w: SparseVector, mat: np.ndarray) -> np.ndarray:
    """Weighted sum of matrix rows: sum_i w(i) * mat[i]. Touches nnz rows."""
    if mat.ndim != 2 or w.dim != mat.shape[0]:
        raise ContractViolation("weight/matrix dimension mismatch")
    if w.nnz == 0:
        return np.zeros(mat.shape[1])
    return w.val @ mat[w.idx]


def sparse_outer_add(mat: np.ndarray, w: SparseVector, a: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """mat += sign * outer(w, a), in place. Returns the touched row indices."""
    if mat.ndim != 2 or w.dim != mat.shape[0] or a.shape != (mat.shape[1],):
        raise ContractViolation("outer-add dimension mismatch")
    if w.nnz:
        mat[w.idx] += (sign * w.val)[:, None] * a
    return w.idx.copy()


def row_zero(mat: np.ndarray, i: int) -> np.ndarray:
    """Zero row i in place and return the evicted row copy."""
    if not 0 <= i < mat.shape[0]:
        raise ContractViolation("row index out of range")
    old = mat[i].copy()
    mat[i] = 0.0
    return old


_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0, dtype=np.float64)


class SparseRowMatrix:
    """Row-sparse matrix with a per-row nonzero cap.

    Rows are held in a dict of (sorted column indices, values) pairs,
    so storage is proportional to the entry count rather than the slot
    count and single-row edits cost O(capacity). csr() exports the
    canonical row-offset / column-index / value triple. An optional
    column map tracks which rows occupy each column, needed for
    column-wise decay and transpose-free matvecs.
    """

    __slots__ = ("rows", "dim_cols", "capacity", "data", "colmap")

    def __init__(self, rows: int, cols: int, capacity: int, track_columns: bool = False):
        if capacity < 1:
            raise ContractViolation("row capacity must be >= 1")
        self.rows = int(rows)
        self.dim_cols = int(cols)
        self.capacity = int(capacity)
        self.data: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.colmap: dict[int, set] | None = {} if track_columns else None

    @property
    def nnz(self) -> int:
        return sum(c.size for c, _ in self.data.values())

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        entry = self.data.get(i)
        if entry is None:
            return _EMPTY_I, _EMPTY_F
        return entry

    def get(self, i: int, j: int) -> float:
        c, v = self.row(i)
        p = np.searchsorted(c, j)
        if p < c.size and c[p] == j:
            return float(v[p])
        return 0.0

    def set_row(self, i: int, cols: np.ndarray, vals: np.ndarray) -> None:
        """Replace row i; cols need not be sorted, zeros are dropped."""
        if not 0 <= i < self.rows:
            raise ContractViolation("row index out of range")
        cols = np.asarray(cols, dtype=np.int64)
        vals = _as_f8(vals)
        keep = vals != 0.0
        cols, vals = cols[keep], vals[keep]
        if cols.size > self.capacity:
            raise ContractViolation(
                f"row {i}: {cols.size} entries exceed capacity {self.capacity}"
            )
        if cols.size and (cols.min() < 0 or cols.max() >= self.dim_cols):
            raise ContractViolation("column index out of range")
        order = np.argsort(cols, kind="stable")
        cols, vals = cols[order], vals[order]
        if np.any(cols[1:] == cols[:-1]):
            raise ContractViolation("duplicate columns in row")
        if self.colmap is not None:
            old, _ = self.row(i)
            for j in old:
                s = self.colmap.get(int(j))
                if s is not None:
                    s.discard(i)
                    if not s:
                        del self.colmap[int(j)]
            for j in cols:
                self.colmap.setdefault(int(j), set()).add(i)
        if cols.size:
            self.data[i] = (cols, vals)
        else:
            self.data.pop(i, None)

    def scale_row(self, i: int, c: float) -> None:
        cols, vals = self.row(i)
        if cols.size == 0:
            return
        if c == 0.0:
            self.set_row(i, _EMPTY_I, _EMPTY_F)
        else:
            vals *= c

    def scale_column(self, j: int, c: float) -> int:
        """Scale column j in place; returns entries touched. Needs colmap."""
        if self.colmap is None:
            raise ContractViolation("column scaling requires track_columns=True")
        rows = self.colmap.get(int(j))
        if not rows:
            return 0
        touched = 0
        for i in sorted(rows):
            cs, vs = self.data[i]
            p = np.searchsorted(cs, j)
            vs[p] *= c
            touched += 1
        if c == 0.0:
            for i in sorted(rows):
                cs, vs = self.data[i]
                self.set_row(i, cs.copy(), vs.copy())
        return touched

    def matvec_sparse(self, w: SparseVector) -> SparseVector:
        """Return the sparse vector y(i) = sum_j mat(i,j) w(j). Needs colmap."""
        if self.colmap is None:
            raise ContractViolation("sparse matvec requires track_columns=True")
        if w.dim != self.dim_cols:
            raise ContractViolation("matvec dimension mismatch")
        acc: dict[int, float] = {}
        for j, wj in zip(w.idx, w.val):
            rows = self.colmap.get(int(j))
            if not rows:
                continue
            for i in rows:
                cs, vs = self.data[i]
                p = np.searchsorted(cs, j)
                acc[i] = acc.get(i, 0.0) + vs[p] * wj
        if not acc:
            return SparseVector(self.rows)
        idx = np.fromiter(sorted(acc), dtype=np.int64, count=len(acc))
        val = np.array([acc[int(i)] for i in idx])
        keep = val != 0.0
        return SparseVector(self.rows, idx[keep], val[keep], checked=False)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.dim_cols))
        for i, (c, v) in self.data.items():
            out[i, c] = v
        return out

    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Canonical (row_offsets, col_indices, values) export."""
        counts = np.zeros(self.rows, dtype=np.int64)
        for i, (c, _) in self.data.items():
            counts[i] = c.size
        offsets = np.zeros(self.rows + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        cols = np.empty(offsets[-1], dtype=np.int64)
        vals = np.empty(offsets[-1])
        for i, (c, v) in self.data.items():
            cols[offsets[i] : offsets[i + 1]] = c
            vals[offsets[i] : offsets[i + 1]] = v
        return offsets, cols, vals

    def check(self) -> None:
        """Validate structural invariants; raises ContractViolation."""
        for i, (c, v) in self.data.items():
            if not 0 <= i < self.rows:
                raise ContractViolation("row index out of range")
            if c.size > self.capacity:
                raise ContractViolation("row over capacity")
            if c.size == 0:
                raise ContractViolation("stored empty row")
            if np.any(c[1:] <= c[:-1]) or c.min() < 0 or c.max() >= self.dim_cols:
                raise ContractViolation("row columns not strictly increasing")
            if np.any(v == 0.0):
                raise ContractViolation("stored zero")
            if not np.all(np.isfinite(v)):
                raise ContractViolation("non-finite entry")
        if self.colmap is not None:
            seen: dict[int, set] = {}
            for i, (c, _) in self.data.items():
                for j in c:
                    seen.setdefault(int(j), set()).add(i)
            if seen != {k: v for k, v in self.colmap.items() if v}:
                raise ContractViolation("column map out of sync")
