"""Block-sparse CSR operators, operator-norm estimation, dense symmetric
eigendecomposition, and the TNSR tensor file format.

Operators store square blocks of size 1 (scalar CSR) or 4 (quaternion block
embedding). Dense matrices are plain float64 ndarrays. A block-4 operator of
block shape (R, C) acts on lane-packed inputs of shape (4C, k) where row
4v + l holds lane l of block-column v.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    NonPositiveMass,
    NonSymmetric,
    ParseError,
    TooLarge,
)

# Dense eigendecomposition size cap; larger requests error rather than
# silently subsampling.
MAX_DENSE_N = 3000

POWER_ITER_DEFAULT = 1000
POWER_ITER_RTOL = 1e-12


class SparseOperator:
    """Immutable compressed-row matrix of scalar or 4x4 blocks.

    Attributes
    ----------
    rows, cols : int
        Block-level shape.
    block_size : int
        1 or 4.
    indptr, indices, data : ndarray
        CSR structure; ``data`` has shape (nnz, b, b). Column indices are
        sorted and unique within each row; duplicate insertions are summed
        at build time.
    """

    def __init__(self, rows, cols, block_size, indptr, indices, data):
        self.rows = int(rows)
        self.cols = int(cols)
        self.block_size = int(block_size)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        b = self.block_size
        if b not in (1, 4):
            raise DimensionMismatch(f"block_size must be 1 or 4, got {b}")
        if self.data.shape != (len(self.indices), b, b):
            raise DimensionMismatch(
                f"data shape {self.data.shape} != (nnz, {b}, {b})")
        if not np.isfinite(self.data).all():
            raise ValueError("operator blocks must be finite")

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_triplets(cls, rows, cols, r_idx, c_idx, values, block_size=1):
        """Build from (row, col, block) triplets; duplicates are summed."""
        b = int(block_size)
        r_idx = np.asarray(r_idx, dtype=np.int64)
        c_idx = np.asarray(c_idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64).reshape(len(r_idx), b, b)
        if r_idx.size and (r_idx.min() < 0 or r_idx.max() >= rows
                           or c_idx.min() < 0 or c_idx.max() >= cols):
            raise DimensionMismatch("triplet index out of range")
        order = np.lexsort((c_idx, r_idx))
        r_idx, c_idx, values = r_idx[order], c_idx[order], values[order]
        if r_idx.size:
            key = r_idx * cols + c_idx
            first = np.ones(len(key), dtype=bool)
            first[1:] = key[1:] != key[:-1]
            slots = np.cumsum(first) - 1
            nnz = int(slots[-1]) + 1
            data = np.zeros((nnz, b, b))
            np.add.at(data, slots, values)
            r_u = r_idx[first]
            c_u = c_idx[first]
        else:
            data = np.zeros((0, b, b))
            r_u = r_idx
            c_u = c_idx
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(indptr, r_u + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(rows, cols, b, indptr, c_u, data)

    @classmethod
    def identity(cls, n, block_size=1):
        b = int(block_size)
        eye = np.broadcast_to(np.eye(b), (n, b, b)).copy()
        return cls.from_triplets(n, n, np.arange(n), np.arange(n), eye, b)

    @classmethod
    def from_diagonal(cls, diag):
        diag = np.asarray(diag, dtype=np.float64)
        n = len(diag)
        return cls.from_triplets(n, n, np.arange(n), np.arange(n),
                                 diag.reshape(n, 1, 1), 1)

    # -- shape helpers -----------------------------------------------------

    @property
    def lane_rows(self) -> int:
        return self.rows * self.block_size

    @property
    def lane_cols(self) -> int:
        return self.cols * self.block_size

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row_block_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    # -- algebra -----------------------------------------------------------

    def scale_rows(self, s) -> "SparseOperator":
        """diag(s) @ A at block-row granularity (s scalar per block row)."""
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.rows,):
            raise DimensionMismatch("row scaling length mismatch")
        owner = np.repeat(np.arange(self.rows), self.row_block_counts())
        data = self.data * s[owner][:, None, None]
        return SparseOperator(self.rows, self.cols, self.block_size,
                              self.indptr, self.indices, data)

    def scale_cols(self, s) -> "SparseOperator":
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.cols,):
            raise DimensionMismatch("col scaling length mismatch")
        data = self.data * s[self.indices][:, None, None]
        return SparseOperator(self.rows, self.cols, self.block_size,
                              self.indptr, self.indices, data)

    def __add__(self, other: "SparseOperator") -> "SparseOperator":
        if (self.rows, self.cols, self.block_size) != (other.rows, other.cols, other.block_size):
            raise DimensionMismatch("operator shapes differ")
        own = np.repeat(np.arange(self.rows), self.row_block_counts())
        oth = np.repeat(np.arange(other.rows), other.row_block_counts())
        return SparseOperator.from_triplets(
            self.rows, self.cols,
            np.concatenate([own, oth]),
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.data, other.data]),
            self.block_size,
        )

    def __mul__(self, scalar: float) -> "SparseOperator":
        return SparseOperator(self.rows, self.cols, self.block_size,
                              self.indptr, self.indices, self.data * float(scalar))

    __rmul__ = __mul__

    def to_dense(self) -> np.ndarray:
        b = self.block_size
        out = np.zeros((self.lane_rows, self.lane_cols))
        owner = np.repeat(np.arange(self.rows), self.row_block_counts())
        for n in range(self.nnz):
            r, c = owner[n], self.indices[n]
            out[b * r : b * r + b, b * c : b * c + b] += self.data[n]
        return out

    def frobenius_norm(self) -> float:
        return float(np.sqrt(np.sum(self.data ** 2)))


def spmv(A: SparseOperator, X: np.ndarray) -> np.ndarray:
    """Y = A @ X on lane-packed dense input.

    X has shape (A.lane_cols,) or (A.lane_cols, k). Deterministic: per-row
    contributions accumulate in index order.
    """
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    if X.shape[0] != A.lane_cols:
        raise DimensionMismatch(
            f"operand has {X.shape[0]} rows, operator expects {A.lane_cols}")
    b = A.block_size
    k = X.shape[1]
    owner = np.repeat(np.arange(A.rows), A.row_block_counts())
    if b == 1:
        contrib = A.data[:, 0, 0][:, None] * X[A.indices]
        Y = np.zeros((A.rows, k))
        np.add.at(Y, owner, contrib)
    else:
        Xb = X.reshape(A.cols, b, k)
        contrib = np.einsum("nij,njk->nik", A.data, Xb[A.indices])
        Yb = np.zeros((A.rows, b, k))
        np.add.at(Yb, owner, contrib)
        Y = Yb.reshape(A.rows * b, k)
    return Y[:, 0] if squeeze else Y


def transpose(A: SparseOperator) -> SparseOperator:
    """Blockwise transpose; each block is transposed too.

    For quaternion blocks the block transpose is the conjugate, so this
    realizes the conjugate-transpose of a quaternion matrix.
    """
    owner = np.repeat(np.arange(A.rows), A.row_block_counts())
    return SparseOperator.from_triplets(
        A.cols, A.rows, A.indices, owner,
        np.swapaxes(A.data, 1, 2), A.block_size)


def power_iteration_norm(A: SparseOperator, iters: int = POWER_ITER_DEFAULT,
                         seed: int = 0) -> float:
    """Largest singular value of A estimated by power iteration on A^T A.

    Deterministic given ``seed``; the Rayleigh-quotient estimate is
    nondecreasing in the iteration count and never exceeds sigma_max. Stops
    early when the estimate changes by < 1e-12 relative. A zero operator
    returns 0.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.lane_cols)
    nv = np.linalg.norm(v)
    if nv == 0 or A.nnz == 0:
        return 0.0
    v /= nv
    At = transpose(A)
    est = 0.0
    for _ in range(iters):
        w = spmv(A, v)
        rayleigh = float(w @ w)  # = v^T A^T A v with ||v|| = 1
        new_est = np.sqrt(max(rayleigh, 0.0))
        u = spmv(At, w)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = u / nu
        if est > 0 and abs(new_est - est) <= POWER_ITER_RTOL * est:
            est = new_est
            break
        est = new_est
    return est


# -- dense symmetric eigensolver ---------------------------------------------


@dataclass
class EigenDecomposition:
    """Generalized eigenpairs S e = lambda diag(m) e.

    ``eigenvalues`` ascend; eigenvector columns are orthonormal in the
    mass-weighted inner product e_k^T diag(m) e_l = delta_kl.
    """

    eigenvalues: np.ndarray       # (N,)
    eigenvectors: np.ndarray      # (N, N), columns
    mass: np.ndarray              # (N,)

    def coefficients(self, x: np.ndarray) -> np.ndarray:
        """Spectral coefficients <e_k, x>_m of a signal (N,) or (N, d)."""
        x = np.asarray(x, dtype=np.float64)
        mx = x * (self.mass[:, None] if x.ndim == 2 else self.mass)
        return self.eigenvectors.T @ mx


def _householder_tridiagonalize(A: np.ndarray):
    """Reduce symmetric A to tridiagonal T = Q^T A Q; returns (d, e, Q)."""
    n = A.shape[0]
    A = A.copy()
    Q = np.eye(n)
    for k in range(n - 2):
        x = A[k + 1 :, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += np.copysign(norm_x, x[0] if x[0] != 0 else 1.0)
        vn = np.linalg.norm(v)
        if vn == 0.0:
            continue
        v /= vn
        # two-sided reflection on the trailing principal submatrix:
        # (I-2vv^T) A (I-2vv^T) = A - 2(v w2^T + w2 v^T) with w2 = Av - (v^T Av) v
        sub = A[k + 1 :, k + 1 :]
        w = sub @ v
        w2 = w - (v @ w) * v
        sub -= 2.0 * (np.outer(v, w2) + np.outer(w2, v))
        col = A[k + 1 :, k]
        new_first = -np.copysign(norm_x, x[0] if x[0] != 0 else 1.0)
        col[:] = 0.0
        col[0] = new_first
        A[k, k + 1 :] = A[k + 1 :, k]
        Qsub = Q[:, k + 1 :]
        Qsub -= 2.0 * np.outer(Qsub @ v, v)
    d = np.diag(A).copy()
    e = np.zeros(n)
    if n > 1:
        e[: n - 1] = np.diag(A, -1)
    return d, e, Q


def _implicit_ql(d: np.ndarray, e: np.ndarray, Z: np.ndarray,
                 max_sweeps: int = 50):
    """Implicit-shift QL on a symmetric tridiagonal matrix.

    d is the diagonal, e[i] couples d[i] and d[i+1] (e[n-1] unused). Z
    accumulates the rotations; on return d holds eigenvalues and Z columns
    the eigenvectors. Classic EISPACK tql2 recurrence.
    """
    n = len(d)
    eps = np.finfo(np.float64).eps
    for l in range(n):
        sweeps = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            sweeps += 1
            if sweeps > max_sweeps:
                raise RuntimeError("QL iteration failed to converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + np.copysign(r, g))
            s = c = 1.0
            p = 0.0
            for i in range(m - 1, l - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                zi = Z[:, i].copy()
                Z[:, i + 1], Z[:, i] = s * zi + c * Z[:, i + 1], c * zi - s * Z[:, i + 1]
            else:
                d[l] -= p
                e[l] = g
                e[m] = 0.0
    return d, Z


def dense_sym_eigh(A: np.ndarray):
    """Eigendecomposition of a dense symmetric matrix.

    Householder tridiagonalization followed by implicit-shift QL; ascending
    eigenvalues, orthonormal eigenvector columns. Deterministic.
    """
    n = A.shape[0]
    if n == 1:
        return A[:1, 0].copy(), np.ones((1, 1))
    d, e, Q = _householder_tridiagonalize(A)
    d, Z = _implicit_ql(d, e, Q)
    order = np.argsort(d, kind="stable")
    return d[order], Z[:, order]


def sym_eigen_generalized(S: SparseOperator, m: np.ndarray,
                          sym_tol: float = 1e-10) -> EigenDecomposition:
    """Solve S e = lambda diag(m) e for symmetric S and positive weights m.

    Works through the symmetrized dense problem
    diag(m)^-1/2 S diag(m)^-1/2. Raises TooLarge above MAX_DENSE_N,
    NonSymmetric / NonPositiveMass on bad input.
    """
    if S.block_size != 1 or S.rows != S.cols:
        raise DimensionMismatch("generalized eigensolver expects square scalar operator")
    n = S.rows
    if n > MAX_DENSE_N:
        raise TooLarge(f"N={n} exceeds MAX_DENSE_N={MAX_DENSE_N}")
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (n,):
        raise DimensionMismatch("mass length mismatch")
    if (m <= 0).any():
        raise NonPositiveMass("mass weights must be strictly positive")
    A = S.to_dense()
    scale = max(1.0, np.abs(A).max())
    if np.abs(A - A.T).max() > sym_tol * scale:
        raise NonSymmetric("operator is not symmetric within tolerance")
    rs = 1.0 / np.sqrt(m)
    B = (A * rs[None, :]) * rs[:, None]
    B = 0.5 * (B + B.T)
    lam, Y = dense_sym_eigh(B)
    vecs = Y * rs[:, None]
    return EigenDecomposition(eigenvalues=lam, eigenvectors=vecs, mass=m)


# -- TNSR binary tensor format ------------------------------------------------

_TNSR_MAGIC = b"TNSR"


def write_tnsr(path, array: np.ndarray) -> None:
    """Write a float64 tensor: magic, u32 rank, u64 dims[], LE f64 payload."""
    arr = np.asarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_TNSR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _TNSR_MAGIC:
        raise ParseError(f"{path}: missing TNSR magic")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    payload = blob[8 + 8 * rank :]
    expected = int(np.prod(dims)) * 8 if rank else 8
    if len(payload) != expected:
        raise ParseError(f"{path}: payload size {len(payload)} != {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def dump_csr_text(A: SparseOperator, path) -> None:
    """Human-readable CSR dump for debugging."""
    owner = np.repeat(np.arange(A.rows), A.row_block_counts())
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# rows={A.rows} cols={A.cols} block={A.block_size} nnz={A.nnz}\n")
        for n in range(A.nnz):
            vals = " ".join("%.17g" % x for x in A.data[n].ravel())
            fh.write(f"{owner[n]} {A.indices[n]} {vals}\n")
