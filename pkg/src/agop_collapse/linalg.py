"""Dense symmetric linear algebra shared by the rest of the package.

Everything here works on plain float64 ``numpy`` arrays. Matrices that enter
through :func:`as_matrix` are checked for finiteness once, so downstream code
can assume clean input.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

JITTER_SEQUENCE = (0.0, 1e-10, 1e-8, 1e-6)
DEFAULT_CLAMP_TOL = 1e-10


class LinalgError(ValueError):
    """Raised when a matrix violates a numerical precondition."""


class SymEig(NamedTuple):
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, orthonormal


class SolveResult(NamedTuple):
    solution: np.ndarray
    jitter: float


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a 2-D float64 array, rejecting NaN/Inf and empty shapes."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise LinalgError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"{name} contains non-finite entries")
    return m


def _check_symmetric(a: np.ndarray, tol: float = 1e-10) -> None:
    if a.shape[0] != a.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    asym = np.abs(a - a.T).max()
    if asym > tol * scale:
        raise LinalgError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")


def sym_eig(a) -> SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues in descending order."""
    a = as_matrix(a)
    _check_symmetric(a)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return SymEig(w[::-1].copy(), v[:, ::-1].copy())


def psd_sqrt(m, clamp_tol: float = DEFAULT_CLAMP_TOL) -> np.ndarray:
    """Symmetric PSD square root.

    Eigenvalues in ``[-clamp_tol * lambda_max, 0)`` are treated as roundoff and
    set to zero; anything more negative means the input was never PSD.
    """
    w, v = sym_eig(m)
    lam_max = max(w[0], 0.0)
    floor = -clamp_tol * lam_max
    if w[-1] < floor:
        raise LinalgError(
            f"matrix is not PSD: eigenvalue {w[-1]:.3e} below {floor:.3e}"
        )
    root = np.sqrt(np.clip(w, 0.0, None))
    s = (v * root) @ v.T
    return 0.5 * (s + s.T)


def spd_solve(a, b, jitters=JITTER_SEQUENCE) -> SolveResult:
    """Solve ``A X = B`` for symmetric PSD ``A`` by Cholesky with jitter fallback.

    The jitter is added to the diagonal only when the factorization of the
    previous level fails; the level that succeeded is returned alongside X.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    _check_symmetric(a)
    if b.shape[0] != a.shape[0]:
        raise LinalgError(f"shape mismatch: A is {a.shape}, B is {b.shape}")
    eye = np.eye(a.shape[0])
    for jitter in jitters:
        try:
            chol = np.linalg.cholesky(a + jitter * eye if jitter else a)
        except np.linalg.LinAlgError:
            continue
        y = solve_triangular(chol, b, lower=True, check_finite=False)
        x = solve_triangular(chol.T, y, lower=False, check_finite=False)
        return SolveResult(x, float(jitter))
    raise LinalgError(
        f"Cholesky factorization failed at maximum jitter {jitters[-1]:g}"
    )


def pearson_flat(a, b) -> float:
    """Correlation of two same-shape matrices after flattening and mean removal."""
    a = as_matrix(a, "A").ravel()
    b = as_matrix(b, "B").ravel()
    if a.shape != b.shape:
        raise LinalgError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise LinalgError("pearson_flat is undefined for a constant matrix")
    r = float(a @ b / (na * nb))
    return min(1.0, max(-1.0, r))


def spectral_norm(a, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    a = as_matrix(a)
    if not np.any(a):
        return 0.0
    # fixed start vector keeps the result a pure function of the input
    v = np.random.default_rng(0).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = np.sqrt(nw)
        v = w / nw
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    # Rayleigh quotient of the final iterate is more accurate than ||A^T A v||
    return float(np.linalg.norm(a @ v))


def column_normalize(x) -> np.ndarray:
    """Scale each column to unit l2 norm."""
    x = as_matrix(x, "X")
    norms = np.linalg.norm(x, axis=0)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise LinalgError(f"column {int(bad[0])} has near-zero norm {norms[bad[0]]:.3e}")
    return x / norms
