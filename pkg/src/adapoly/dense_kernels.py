"""Small dense kernels: symmetric eigensolver, Cholesky, Cholesky-QR, Rayleigh-Ritz."""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

from .sparse_core import CsrMatrix, naive_spmm


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class EigDecomposition(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(B) -> EigDecomposition:
    """Full eigen-decomposition of a symmetric matrix, eigenvalues ascending.

    The input is symmetrized as ``(B + B.T) / 2`` first.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError(f"square matrix expected, got shape {B.shape}")
    if not np.all(np.isfinite(B)):
        raise ValueError("matrix has non-finite entries")
    w, U = np.linalg.eigh(0.5 * (B + B.T))
    return EigDecomposition(w, U)


def cholesky(G) -> np.ndarray:
    """Upper-triangular ``R`` with ``R.T @ R == G`` and positive diagonal."""
    G = np.asarray(G, dtype=np.float64)
    if G.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    R = L.T.copy()
    if not np.all(np.diag(R) > 0) or not np.all(np.isfinite(R)):
        raise NotPositiveDefinite("non-positive pivot")
    return R


def _cholqr_pass(X: np.ndarray) -> np.ndarray:
    # column equilibration keeps the Gram matrix well scaled when the
    # filtered columns differ in norm by orders of magnitude
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NotPositiveDefinite("zero or non-finite column")
    Xs = X / norms
    G = Xs.T @ Xs
    G = 0.5 * (G + G.T)
    try:
        R = cholesky(G)
    except NotPositiveDefinite:
        p = G.shape[0]
        R = cholesky(G + (1e-14 * np.trace(G) / p) * np.eye(p))
    return sla.solve_triangular(R, Xs.T, trans="T", lower=False).T


def mgs_orth(X, drop_tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt with one reorthogonalization sweep.

    Columns whose norm falls below ``drop_tol`` times their original norm
    after projection are treated as dependent and dropped.
    """
    X = np.array(X, dtype=np.float64)
    n, p = X.shape
    Q = np.empty((n, p))
    q = 0
    for j in range(p):
        v = X[:, j].copy()
        orig = np.linalg.norm(v)
        if orig == 0 or not np.isfinite(orig):
            continue
        for _ in range(2):
            for i in range(q):
                v -= (Q[:, i] @ v) * Q[:, i]
        nv = np.linalg.norm(v)
        if nv <= drop_tol * orig:
            continue
        Q[:, q] = v / nv
        q += 1
    return Q[:, :q]


def orthogonality_error(Q) -> float:
    return float(np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1])))


def cholesky_qr(X) -> np.ndarray:
    """Orthonormal basis of ``span(X)`` by Cholesky-QR applied twice.

    Falls back to modified Gram-Schmidt when the Gram matrix is not
    numerically positive definite even after a small diagonal shift; in that
    case dependent columns are dropped and the returned basis may be narrower
    than ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] == 0:
        return X.copy()
    try:
        Q = _cholqr_pass(X)
        Q = _cholqr_pass(Q)
        if orthogonality_error(Q) > 1e-12 * max(1, X.shape[1]):
            Q = _cholqr_pass(Q)
    except NotPositiveDefinite:
        Q = None
    if Q is None or orthogonality_error(Q) > 1e-8:
        Q = mgs_orth(X)
        if Q.shape[1] < X.shape[1]:
            warnings.warn(f"basis rank deficient: {X.shape[1]} -> {Q.shape[1]} columns",
                          RuntimeWarning, stacklevel=2)
    return Q


def rayleigh_ritz(A: CsrMatrix, Q) -> tuple[np.ndarray, np.ndarray]:
    """Ritz vectors ``Q @ U`` and ascending Ritz values of ``Q.T A Q``."""
    Q = np.asarray(Q, dtype=np.float64)
    AQ = naive_spmm(A, Q)
    B = Q.T @ AQ
    w, U = sym_eig(B)
    return Q @ U, w
