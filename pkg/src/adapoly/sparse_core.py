"""Sparse storage, Matrix Market ingestion and SpMM kernels.

The tiled kernel (``maspmm``) works on a column-segment re-layout of a CSR
matrix and on dense operands stored as row segments: a dense ``n x K`` block
is split into ``ceil(K / T_k)`` column blocks of width ``T_k`` and kept as a
``(n_col_blocks, n, T_k)`` array, so that every row segment is contiguous.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import IO, Iterable

import numba
import numpy as np
from numba import prange

# skip the TBB layer, whose probe warns on older TBB installs
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

DEFAULT_TILE_ROWS = 256
DEFAULT_TILE_COLS = 64


class MatrixMarketError(ValueError):
    """Raised for malformed or unsupported Matrix Market input."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def set_num_threads(n: int | None) -> int:
    """Set the worker count used by the parallel kernels; returns it."""
    if n is None:
        env = os.environ.get("ADAPOLY_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with sorted, duplicate-free rows."""

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.ascontiguousarray(self.col_idx, dtype=np.int64))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))
        if self.check:
            self.validate()

    def validate(self) -> None:
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.n_rows + 1,):
            raise ValueError("row_ptr must have length n_rows + 1")
        if rp[0] != 0 or rp[-1] != len(ci) or len(ci) != len(self.values):
            raise ValueError("row_ptr does not match the entry arrays")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        # strictly increasing columns inside each row
        d = np.diff(ci)
        row_start = np.zeros(len(ci), dtype=bool)
        row_start[rp[:-1][rp[:-1] < len(ci)]] = True
        if np.any((d <= 0) & ~row_start[1:]):
            raise ValueError("column indices must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry (COO row array)."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_ptr))

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.row_indices(), self.col_idx.copy(), self.values.copy()

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_indices(), self.col_idx] = self.values
        return out

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_coo(self.n_cols, self.n_rows, self.col_idx, self.row_indices(), self.values)

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        t = self.transpose()
        if np.array_equal(t.row_ptr, self.row_ptr) and np.array_equal(t.col_idx, self.col_idx):
            diff = np.abs(t.values - self.values)
            scale = np.abs(self.values).max(initial=0.0)
            return bool(np.all(diff <= tol * scale))
        # patterns differ; explicit zeros may still make it symmetric
        return bool(np.allclose(self.to_dense(), t.to_dense(), rtol=0.0,
                                atol=tol * np.abs(self.values).max(initial=0.0)))

    @classmethod
    def from_coo(cls, n_rows: int, n_cols: int, rows, cols, vals) -> "CsrMatrix":
        """Build from coordinate triplets; duplicates are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if len(rows) and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError("coordinate out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            new = np.ones(len(rows), dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(new)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=row_ptr[1:])
        return cls(n_rows, n_cols, row_ptr, cols, vals)

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n))

    @classmethod
    def diag(cls, d) -> "CsrMatrix":
        d = np.asarray(d, dtype=np.float64)
        n = len(d)
        return cls(n, n, np.arange(n + 1), np.arange(n), d)


# ---------------------------------------------------------------------------
# Matrix Market
# ---------------------------------------------------------------------------

def read_matrix_market(path: str | os.PathLike) -> CsrMatrix:
    with open(path, "r") as fh:
        return parse_matrix_market(fh)


def parse_matrix_market(stream: IO[str] | Iterable[str] | str) -> CsrMatrix:
    """Parse a coordinate Matrix Market stream into CSR.

    Symmetric storage is expanded to both triangles, duplicate entries are
    summed and indices are converted to 0-based.  Only ``real`` and
    ``integer`` fields with ``general`` or ``symmetric`` symmetry are accepted.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = iter(stream)
    try:
        header = next(lines)
    except StopIteration:
        raise MatrixMarketError("empty input", 1) from None
    tokens = header.strip().split()
    if len(tokens) != 5 or tokens[0].lower() != "%%matrixmarket":
        raise MatrixMarketError("missing %%MatrixMarket header", 1)
    obj, fmt, fld, sym = (t.lower() for t in tokens[1:])
    if obj != "matrix":
        raise MatrixMarketError(f"unsupported object {obj!r}", 1)
    if fmt != "coordinate":
        raise MatrixMarketError(f"unsupported format {fmt!r} (coordinate only)", 1)
    if fld not in ("real", "integer", "double"):
        raise MatrixMarketError(f"unsupported field {fld!r}", 1)
    if sym not in ("general", "symmetric"):
        raise MatrixMarketError(f"unsupported symmetry {sym!r}", 1)

    lineno = 1
    size = None
    for raw in lines:
        lineno += 1
        s = raw.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        try:
            size = [int(p) for p in parts]
        except ValueError:
            raise MatrixMarketError("malformed size line", lineno) from None
        if len(size) != 3 or min(size) < 0:
            raise MatrixMarketError("size line must hold rows, cols, nnz", lineno)
        break
    if size is None:
        raise MatrixMarketError("missing size line", lineno)
    n_rows, n_cols, nnz = size
    first_entry_line = lineno + 1

    body = list(lines)
    rows, cols, vals = _parse_entries_fast(body, nnz)
    if rows is None:
        rows, cols, vals = _parse_entries_slow(body, nnz, first_entry_line)
    bad = (rows < 1) | (rows > n_rows) | (cols < 1) | (cols > n_cols)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise MatrixMarketError(
            f"index ({rows[k]}, {cols[k]}) out of bounds for {n_rows}x{n_cols}",
            _entry_line(body, k, first_entry_line))
    rows = rows - 1
    cols = cols - 1
    if sym == "symmetric":
        if n_rows != n_cols:
            raise MatrixMarketError("symmetric matrix must be square", 1)
        off = rows != cols
        rows, cols, vals = (np.concatenate((rows, cols[off])),
                            np.concatenate((cols, rows[off])),
                            np.concatenate((vals, vals[off])))
    return CsrMatrix.from_coo(n_rows, n_cols, rows, cols, vals)


def _parse_entries_fast(body, nnz):
    if any(line.lstrip().startswith("%") for line in body):
        return None, None, None
    tokens = "".join(body).split()
    if len(tokens) != 3 * nnz:
        return None, None, None
    try:
        arr = np.array(tokens, dtype=np.float64).reshape(nnz, 3) if nnz else np.zeros((0, 3))
    except ValueError:
        return None, None, None
    idx = arr[:, :2]
    if np.any(idx != np.round(idx)):
        return None, None, None
    return idx[:, 0].astype(np.int64), idx[:, 1].astype(np.int64), arr[:, 2].copy()


def _parse_entries_slow(body, nnz, first_line):
    rows, cols, vals = [], [], []
    lineno = first_line - 1
    for raw in body:
        lineno += 1
        s = raw.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise MatrixMarketError(f"expected 'row col value', got {len(parts)} fields", lineno)
        if len(rows) >= nnz:
            raise MatrixMarketError(f"more entries than the declared {nnz}", lineno)
        try:
            r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MatrixMarketError(f"malformed entry {s!r}", lineno) from None
        rows.append(r)
        cols.append(c)
        vals.append(v)
    if len(rows) != nnz:
        raise MatrixMarketError(f"expected {nnz} entries, found {len(rows)}", lineno)
    return (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
            np.array(vals, dtype=np.float64))


def _entry_line(body, k, first_line):
    seen = -1
    for offset, raw in enumerate(body):
        s = raw.strip()
        if s and not s.startswith("%"):
            seen += 1
            if seen == k:
                return first_line + offset
    return None


def write_matrix_market(A: CsrMatrix, path, symmetric: bool = False, comment: str | None = None) -> None:
    """Write ``A`` in coordinate format (lower triangle only when symmetric)."""
    r, c, v = A.entries()
    if symmetric:
        keep = r >= c
        r, c, v = r[keep], c[keep], v[keep]
    with open(path, "w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate real {'symmetric' if symmetric else 'general'}\n")
        if comment:
            for line in comment.splitlines():
                fh.write(f"% {line}\n")
        fh.write(f"{A.n_rows} {A.n_cols} {len(v)}\n")
        for i, j, x in zip(r, c, v):
            fh.write(f"{i + 1} {j + 1} {float(x)!r}\n")


# ---------------------------------------------------------------------------
# Reference kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _csr_spmv(row_ptr, col_idx, values, x, y):
    for i in range(len(row_ptr) - 1):
        acc = 0.0
        for jj in range(row_ptr[i], row_ptr[i + 1]):
            acc += values[jj] * x[col_idx[jj]]
        y[i] = acc


@numba.njit(cache=True, parallel=True)
def _csr_spmm(row_ptr, col_idx, values, B, C):
    K = B.shape[1]
    for i in prange(len(row_ptr) - 1):
        for kk in range(K):
            C[i, kk] = 0.0
        for jj in range(row_ptr[i], row_ptr[i + 1]):
            v = values[jj]
            col = col_idx[jj]
            for kk in range(K):
                C[i, kk] += v * B[col, kk]


def csr_spmv(A: CsrMatrix, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (A.n_cols,):
        raise ValueError(f"vector of length {A.n_cols} expected, got shape {x.shape}")
    y = np.empty(A.n_rows)
    _csr_spmv(A.row_ptr, A.col_idx, A.values, x, y)
    return y


def naive_spmm(A: CsrMatrix, B) -> np.ndarray:
    """Row-by-row CSR times dense block; the correctness oracle for ``maspmm``."""
    B = np.ascontiguousarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != A.n_cols:
        raise ValueError(f"dense operand with {A.n_cols} rows expected, got shape {B.shape}")
    C = np.empty((A.n_rows, B.shape[1]))
    if B.shape[1]:
        _csr_spmm(A.row_ptr, A.col_idx, A.values, B, C)
    return C


# ---------------------------------------------------------------------------
# Tiled layout and MaSpMM
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TiledMatrix:
    """Column-segment layout of a sparse matrix.

    Row block ``i`` owns the segments ``act_colseg[i]:act_colseg[i+1]``.
    Segment ``s`` groups the entries ``colseg_ptr[s]:colseg_ptr[s+1]`` that
    share column ``col_idx[s]``; within a block, segments are ordered by
    column and entries of a segment by row.
    """

    n_rows: int
    n_cols: int
    tile_rows: int
    tile_cols: int
    act_colseg: np.ndarray
    colseg_ptr: np.ndarray
    col_idx: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray

    @property
    def n_row_blocks(self) -> int:
        return len(self.act_colseg) - 1

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """COO triplets in layout order."""
        cols = np.repeat(self.col_idx, np.diff(self.colseg_ptr))
        return self.row_idx.copy(), cols, self.values.copy()

    def to_csr(self) -> CsrMatrix:
        r, c, v = self.entries()
        return CsrMatrix.from_coo(self.n_rows, self.n_cols, r, c, v)

    def matmul(self, B, C=None) -> np.ndarray:
        """``C += A @ B`` for row-major ``B`` (convenience wrapper)."""
        B = np.asarray(B, dtype=np.float64)
        if B.ndim != 2 or B.shape[0] != self.n_cols:
            raise ValueError(f"dense operand with {self.n_cols} rows expected, got shape {B.shape}")
        K = B.shape[1]
        Bs = to_row_segments(B, self.tile_cols)
        Cs = np.zeros((Bs.shape[0], self.n_rows, self.tile_cols)) if C is None \
            else to_row_segments(C, self.tile_cols)
        maspmm(self, Bs, Cs, K)
        return from_row_segments(Cs, K)


def csr_to_tiled(A: CsrMatrix, tile_rows: int = DEFAULT_TILE_ROWS,
                 tile_cols: int = DEFAULT_TILE_COLS) -> TiledMatrix:
    """Regroup CSR entries into row blocks of ``tile_rows`` and column segments."""
    if tile_rows < 1 or tile_cols < 1:
        raise ValueError("tile sizes must be >= 1")
    n_blocks = max(1, -(-A.n_rows // tile_rows))
    rows = A.row_indices()
    cols = A.col_idx
    block = rows // tile_rows
    order = np.lexsort((rows, cols, block))
    rows, cols, vals, block = rows[order], cols[order], A.values[order], block[order]
    if len(rows):
        new_seg = np.ones(len(rows), dtype=bool)
        new_seg[1:] = (block[1:] != block[:-1]) | (cols[1:] != cols[:-1])
        seg_start = np.flatnonzero(new_seg)
    else:
        seg_start = np.zeros(0, dtype=np.int64)
    colseg_ptr = np.append(seg_start, len(rows)).astype(np.int64)
    seg_cols = cols[seg_start]
    seg_block = block[seg_start]
    act = np.zeros(n_blocks + 1, dtype=np.int64)
    np.cumsum(np.bincount(seg_block, minlength=n_blocks), out=act[1:])
    return TiledMatrix(A.n_rows, A.n_cols, int(tile_rows), int(tile_cols), act, colseg_ptr,
                       np.ascontiguousarray(seg_cols, dtype=np.int64),
                       np.ascontiguousarray(rows, dtype=np.int64),
                       np.ascontiguousarray(vals, dtype=np.float64))


def to_row_segments(X, tile_cols: int) -> np.ndarray:
    """Row-major ``n x K`` -> ``(ceil(K/tile_cols), n, tile_cols)``, zero padded."""
    X = np.asarray(X, dtype=np.float64)
    n, K = X.shape
    nkb = -(-K // tile_cols)
    out = np.zeros((nkb, n, tile_cols))
    for kb in range(nkb):
        lo, hi = kb * tile_cols, min((kb + 1) * tile_cols, K)
        out[kb, :, : hi - lo] = X[:, lo:hi]
    return out


def from_row_segments(Xs: np.ndarray, K: int) -> np.ndarray:
    nkb, n, tk = Xs.shape
    out = np.empty((n, K))
    for kb in range(nkb):
        lo, hi = kb * tk, min((kb + 1) * tk, K)
        out[:, lo:hi] = Xs[kb, :, : hi - lo]
    return out


@numba.njit(cache=True, parallel=True)
def _maspmm(tile_rows, act_colseg, colseg_ptr, col_idx, row_idx, values, B, C, K):
    nkb, _, tk = B.shape
    n_blocks = len(act_colseg) - 1
    for kb in range(nkb):
        width = min(tk, K - kb * tk)
        for i in prange(n_blocks):
            for jj in range(act_colseg[i], act_colseg[i + 1]):
                col = col_idx[jj]
                for ii in range(colseg_ptr[jj], colseg_ptr[jj + 1]):
                    row = row_idx[ii]
                    val = values[ii]
                    for kk in range(width):
                        C[kb, row, kk] += val * B[kb, col, kk]


def maspmm(A: TiledMatrix, B: np.ndarray, C: np.ndarray, K: int | None = None) -> np.ndarray:
    """Accumulate ``C += A @ B`` with both dense operands in row-segment layout.

    ``B`` has shape ``(n_col_blocks, A.n_cols, A.tile_cols)`` and ``C`` shape
    ``(n_col_blocks, A.n_rows, A.tile_cols)``; ``K`` is the logical width
    (defaults to the padded width).  Row blocks are distributed over workers;
    each worker owns the C rows of its block, so results do not depend on the
    worker count.
    """
    if B.ndim != 3 or C.ndim != 3:
        raise ValueError("row-segment operands must be 3-d arrays")
    if B.shape[2] != A.tile_cols or C.shape[2] != A.tile_cols:
        raise ValueError(f"column-block width {A.tile_cols} expected")
    if B.shape[1] != A.n_cols or C.shape[1] != A.n_rows or B.shape[0] != C.shape[0]:
        raise ValueError("dimension mismatch between A, B and C")
    if K is None:
        K = B.shape[0] * B.shape[2]
    if K > B.shape[0] * B.shape[2]:
        raise ValueError("logical width exceeds the operand")
    if K == 0 or A.nnz == 0:
        return C
    _maspmm(A.tile_rows, A.act_colseg, A.colseg_ptr, A.col_idx, A.row_idx, A.values, B, C, K)
    return C
