"""
Spectral primitives behind every metric: covariance, symmetric
eigendecomposition, SVD, nuclear norm and PCA.

Arrays are numpy ndarrays; everything here computes in float64 and is pure.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np

from .config import get_settings
from .errors import DegenerateCloud, NonFiniteError, NotSymmetric, NumericalFailure

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
JACOBI_TOL = 1e-12
DEGENERATE_VARIANCE = 1e-12
SIGN_EPS = 1e-10


@dataclass(frozen=True)
class SymEigen:
    """Eigenvalues descending, eigenvectors as orthonormal columns"""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray          # r x d, orthonormal rows
    explained_variance: np.ndarray  # r, descending
    total_variance: float
    spectrum: np.ndarray            # all d eigenvalues of the covariance
    mean: np.ndarray

    @property
    def explained_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance


def check_finite(array: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return array


def as_float64_2d(a, what: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {arr.shape}")
    return check_finite(arr, what)


# ==============================================================================
# COVARIANCE
# ==============================================================================

def covariance(points, ddof: int = 1) -> np.ndarray:
    """Sample covariance of an N x d cloud (divisor N - ddof)"""
    X = as_float64_2d(points, "points")
    n = X.shape[0]
    if n < 2:
        raise DegenerateCloud(f"covariance needs at least 2 points, got {n}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (n - ddof)
    return 0.5 * (cov + cov.T)


# ==============================================================================
# SYMMETRIC EIGENDECOMPOSITION (cyclic Jacobi, round-robin ordering)
# ==============================================================================

@lru_cache(maxsize=64)
def _round_robin(d: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint (p, q) pair sets; every pair appears once per sweep"""
    n = d + (d % 2)
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < d and q < d]
        if pairs:
            P = np.array([p for p, _ in pairs], dtype=np.intp)
            Q = np.array([q for _, q in pairs], dtype=np.intp)
            rounds.append((P, Q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(A: np.ndarray) -> float:
    off = A - np.diag(np.diag(A))
    return float(np.sqrt(np.sum(off * off)))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """First nonzero coordinate of every column positive"""
    out = vectors.copy()
    for j in range(out.shape[1]):
        nonzero = np.flatnonzero(np.abs(out[:, j]) > SIGN_EPS)
        if nonzero.size and out[nonzero[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def _jacobi(A: np.ndarray, max_sweeps: int) -> Tuple[np.ndarray, np.ndarray]:
    d = A.shape[0]
    A = A.copy()
    V = np.eye(d)
    scale = float(np.linalg.norm(A))
    if scale == 0.0:
        return np.zeros(d), V
    rounds = _round_robin(d)
    for sweep in range(max_sweeps):
        if _off_norm(A) <= JACOBI_TOL * scale:
            logger.debug("jacobi converged after %d sweeps (d=%d)", sweep, d)
            return np.diag(A).copy(), V
        for P, Q in rounds:
            apq = A[P, Q]
            active = apq != 0.0
            if not np.any(active):
                continue
            safe = np.where(active, apq, 1.0)
            theta = (A[Q, Q] - A[P, P]) / (2.0 * safe)
            t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = np.where(active, 1.0 / np.sqrt(t * t + 1.0), 1.0)
            s = np.where(active, t * c, 0.0)

            AP, AQ = A[:, P].copy(), A[:, Q].copy()
            A[:, P] = AP * c - AQ * s
            A[:, Q] = AP * s + AQ * c
            AP, AQ = A[P, :].copy(), A[Q, :].copy()
            A[P, :] = c[:, None] * AP - s[:, None] * AQ
            A[Q, :] = s[:, None] * AP + c[:, None] * AQ
            A[P, Q] = 0.0
            A[Q, P] = 0.0

            VP, VQ = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = VP * c - VQ * s
            V[:, Q] = VP * s + VQ * c
    if _off_norm(A) <= JACOBI_TOL * scale:
        return np.diag(A).copy(), V
    raise NumericalFailure(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def sym_eig(A, method: str = "jacobi") -> SymEigen:
    """Full spectrum of a symmetric matrix, eigenvalues descending"""
    M = as_float64_2d(A, "symmetric matrix")
    if M.shape[0] != M.shape[1]:
        raise NotSymmetric(f"matrix is not square: {M.shape}")
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(M))) if M.size else 1.0):
        raise NotSymmetric(f"max |A - A^T| = {asym:.3e}")
    M = 0.5 * (M + M.T)

    if method == "jacobi":
        values, vectors = _jacobi(M, get_settings().eig_max_sweeps)
    elif method == "lapack":
        values, vectors = np.linalg.eigh(M)
    else:
        raise ValueError(f"unknown eigen method {method!r}")

    order = np.argsort(-values, kind="stable")
    return SymEigen(eigenvalues=values[order], eigenvectors=_fix_signs(vectors[:, order]))


# ==============================================================================
# SVD AND NUCLEAR NORM
# ==============================================================================

def _complete_columns(U: np.ndarray, missing: List[int]) -> np.ndarray:
    """Fill zero columns of U with unit vectors orthogonal to the rest"""
    m = U.shape[0]
    filled = [j for j in range(U.shape[1]) if j not in set(missing)]
    for j in missing:
        for e in range(m):
            candidate = np.zeros(m)
            candidate[e] = 1.0
            for f in filled:
                candidate -= (U[:, f] @ candidate) * U[:, f]
            norm = np.linalg.norm(candidate)
            if norm > 1e-8:
                U[:, j] = candidate / norm
                filled.append(j)
                break
    return U


def svd(A) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD A = U diag(S) V^T via the eigendecomposition of A^T A"""
    M = as_float64_2d(A, "matrix")
    m, n = M.shape
    if m < n:
        U, S, V = svd(M.T)
        return V, S, U
    gram = M.T @ M
    V = sym_eig(0.5 * (gram + gram.T)).eigenvectors
    W = M @ V
    S = np.linalg.norm(W, axis=0)
    order = np.argsort(-S, kind="stable")
    S, V, W = S[order], V[:, order], W[:, order]

    tol = (S[0] if S.size else 0.0) * 1e-14 * max(m, n)
    U = np.zeros((m, n))
    keep = S > tol
    U[:, keep] = W[:, keep] / S[keep]
    S = np.where(keep, S, 0.0)
    missing = [j for j in range(n) if not keep[j]]
    if missing:
        U = _complete_columns(U, missing)
    return U, S, V


def nuclear_norm(A) -> float:
    """Sum of singular values"""
    _, S, _ = svd(A)
    return float(np.sum(S))


def orthonormal_basis(A, rel_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) of the column space of A"""
    U, S, _ = svd(A)
    if not S.size or S[0] == 0.0:
        return np.zeros((np.asarray(A).shape[0], 0))
    return U[:, S > rel_tol * S[0]]


def project_onto(basis: np.ndarray, vectors) -> np.ndarray:
    """Orthogonal projection B B^T v of every column v"""
    return basis @ (basis.T @ as_float64_2d(vectors, "vectors"))


def projection_norm_ratios(vectors, basis: np.ndarray) -> np.ndarray:
    """||B B^T v|| / ||v|| for every column v, B orthonormal columns"""
    V = as_float64_2d(vectors, "vectors")
    projected = project_onto(basis, V)
    return np.linalg.norm(projected, axis=0) / np.linalg.norm(V, axis=0)


# ==============================================================================
# PCA
# ==============================================================================

def pca(points, r: int) -> PcaResult:
    """Top-r principal components of an N x d cloud"""
    X = as_float64_2d(points, "points")
    d = X.shape[1]
    if not 1 <= r <= d:
        raise ValueError(f"r must be in [1, {d}], got {r}")
    cov = covariance(X)
    total = float(np.trace(cov))
    if total < DEGENERATE_VARIANCE:
        raise DegenerateCloud(f"total variance {total:.3e} below {DEGENERATE_VARIANCE}")
    eig = sym_eig(cov)
    spectrum = np.clip(eig.eigenvalues, 0.0, None)
    return PcaResult(
        components=eig.eigenvectors[:, :r].T.copy(),
        explained_variance=spectrum[:r].copy(),
        total_variance=total,
        spectrum=spectrum,
        mean=X.mean(axis=0),
    )
