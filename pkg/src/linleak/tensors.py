"""Dense and sparse (COO / CSR) matrix containers with byte-size accounting.

Values are always held as float64 in memory.  The ``datasize`` used for
size accounting models the on-wire convention of 4-byte parameters, and
index entries are 8-byte integers as in PyTorch's sparse layouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DenseMatrix",
    "SparseMatrixCOO",
    "SparseMatrixCSR",
    "coo_nbytes",
    "csr_nbytes",
    "coo_byte_size",
    "csr_byte_size",
    "dense_nbytes",
    "densify",
    "sparsify",
    "MIB",
]

MIB = 2**20
INDEX_BYTES = 8
DEFAULT_DATASIZE = 4


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def coo_nbytes(nnz: int, dim: int = 2, datasize: int = DEFAULT_DATASIZE) -> int:
    """Bytes for a COO tensor with ``nnz`` stored entries: (dim*8 + datasize)*nnz."""
    if datasize not in (4, 8):
        raise ValueError(f"datasize must be 4 or 8, got {datasize}")
    return (dim * INDEX_BYTES + datasize) * int(nnz)


def csr_nbytes(rows: int, nnz: int, idxsize: int = INDEX_BYTES,
               datasize: int = DEFAULT_DATASIZE) -> int:
    return (int(rows) + 1) * idxsize + int(nnz) * idxsize + int(nnz) * datasize


def dense_nbytes(count: int, datasize: int = DEFAULT_DATASIZE) -> int:
    return int(count) * datasize


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """Row-major 2-D float64 matrix."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"DenseMatrix needs a 2-D array, got ndim={v.ndim}")
        if not np.all(np.isfinite(v)):
            raise ValueError("DenseMatrix values must be finite")
        object.__setattr__(self, "values", _frozen(v, np.float64))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def nbytes(self, datasize: int = DEFAULT_DATASIZE) -> int:
        return dense_nbytes(self.values.size, datasize)

    def __eq__(self, other):
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)


class SparseMatrixCOO:
    """Coordinate-format matrix with sorted, unique, nonzero entries.

    Use :meth:`from_triplets` for unsorted or duplicated input; the plain
    constructor validates and rejects anything not already canonical.
    """

    __slots__ = ("rows", "cols", "row_idx", "col_idx", "values")

    def __init__(self, shape, row_idx, col_idx, values, *, check: bool = True):
        self.rows, self.cols = (int(shape[0]), int(shape[1]))
        self.row_idx = _frozen(row_idx, np.int64)
        self.col_idx = _frozen(col_idx, np.int64)
        self.values = _frozen(values, np.float64)
        if check:
            self._validate()

    def _validate(self):
        r, c, v = self.row_idx, self.col_idx, self.values
        if not (r.ndim == c.ndim == v.ndim == 1 and r.size == c.size == v.size):
            raise ValueError("row_idx, col_idx and values must be 1-D of equal length")
        if self.rows < 0 or self.cols < 0:
            raise ValueError("negative shape")
        if r.size == 0:
            return
        if r.min() < 0 or r.max() >= self.rows or c.min() < 0 or c.max() >= self.cols:
            raise ValueError("index out of range")
        lin = r * self.cols + c
        if np.any(np.diff(lin) <= 0):
            raise ValueError("indices must be strictly lexicographically sorted")
        if np.any(v == 0):
            raise ValueError("explicit zeros are not allowed in sparse containers")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")

    @classmethod
    def from_triplets(cls, shape, row_idx, col_idx, values):
        """Build from arbitrary triplets: duplicates summed, zeros dropped, sorted."""
        rows, cols = int(shape[0]), int(shape[1])
        r = np.asarray(row_idx, dtype=np.int64).ravel()
        c = np.asarray(col_idx, dtype=np.int64).ravel()
        v = np.asarray(values, dtype=np.float64).ravel()
        if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise ValueError("index out of range")
        lin = r * cols + c
        uniq, inv = np.unique(lin, return_inverse=True)
        summed = np.zeros(uniq.size)
        np.add.at(summed, inv, v)
        keep = summed != 0
        uniq = uniq[keep]
        return cls((rows, cols), uniq // cols if cols else uniq, uniq % cols if cols else uniq,
                   summed[keep])

    @classmethod
    def empty(cls, shape):
        z = np.zeros(0, dtype=np.int64)
        return cls(shape, z, z, np.zeros(0))

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def linear_index(self) -> np.ndarray:
        return self.row_idx * self.cols + self.col_idx

    def with_values(self, values) -> "SparseMatrixCOO":
        """Same sparsity pattern, new values (must stay nonzero)."""
        return SparseMatrixCOO(self.shape, self.row_idx, self.col_idx, values)

    def nbytes(self, dim: int = 2, datasize: int = DEFAULT_DATASIZE) -> int:
        return coo_nbytes(self.nnz, dim, datasize)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_idx, self.col_idx] = self.values
        return out

    def to_csr(self) -> "SparseMatrixCSR":
        counts = np.bincount(self.row_idx, minlength=self.rows)
        row_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return SparseMatrixCSR(self.shape, row_ptr, self.col_idx, self.values)

    def __repr__(self):
        return f"SparseMatrixCOO(shape={self.shape}, nnz={self.nnz})"

    def __eq__(self, other):
        if not isinstance(other, SparseMatrixCOO):
            return NotImplemented
        return (self.shape == other.shape
                and np.array_equal(self.row_idx, other.row_idx)
                and np.array_equal(self.col_idx, other.col_idx)
                and np.array_equal(self.values, other.values))


class SparseMatrixCSR:
    __slots__ = ("rows", "cols", "row_ptr", "col_idx", "values")

    def __init__(self, shape, row_ptr, col_idx, values):
        self.rows, self.cols = int(shape[0]), int(shape[1])
        self.row_ptr = _frozen(row_ptr, np.int64)
        self.col_idx = _frozen(col_idx, np.int64)
        self.values = _frozen(values, np.float64)
        p = self.row_ptr
        if p.size != self.rows + 1 or p[0] != 0:
            raise ValueError("row_ptr must have rows+1 entries starting at 0")
        if np.any(np.diff(p) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if p[-1] != self.values.size or self.col_idx.size != self.values.size:
            raise ValueError("row_ptr[rows] must equal nnz")
        for r in range(self.rows):
            seg = self.col_idx[p[r]:p[r + 1]]
            if seg.size and (np.any(np.diff(seg) <= 0) or seg[0] < 0 or seg[-1] >= self.cols):
                raise ValueError(f"column indices of row {r} unsorted or out of range")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def nbytes(self, idxsize: int = INDEX_BYTES, datasize: int = DEFAULT_DATASIZE) -> int:
        return csr_nbytes(self.rows, self.nnz, idxsize, datasize)

    def to_coo(self) -> SparseMatrixCOO:
        rows = np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.row_ptr))
        return SparseMatrixCOO(self.shape, rows, self.col_idx, self.values)

    def to_dense(self) -> np.ndarray:
        return self.to_coo().to_dense()

    def __repr__(self):
        return f"SparseMatrixCSR(shape={self.shape}, nnz={self.nnz})"


def coo_byte_size(m: SparseMatrixCOO, dim: int = 2, datasize: int = DEFAULT_DATASIZE) -> int:
    return coo_nbytes(m.nnz, dim, datasize)


def csr_byte_size(m: SparseMatrixCSR, idxsize: int = INDEX_BYTES,
                  datasize: int = DEFAULT_DATASIZE) -> int:
    return csr_nbytes(m.rows, m.nnz, idxsize, datasize)


def densify(m: SparseMatrixCOO) -> DenseMatrix:
    return DenseMatrix(m.to_dense())


def sparsify(m, threshold: float = 0.0) -> SparseMatrixCOO:
    """Drop entries with ``|v| <= threshold``; the rest become COO entries."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    d = m.values if isinstance(m, DenseMatrix) else np.asarray(m, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("sparsify expects a 2-D matrix")
    r, c = np.nonzero(np.abs(d) > threshold)
    return SparseMatrixCOO(d.shape, r, c, d[r, c])
