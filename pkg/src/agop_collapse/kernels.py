"""Kernel evaluation, kernel ridge(less) regression and the predictor AGOP.

The AGOP of a predictor ``f`` on data ``X`` (columns are samples) is

    M = (1/N) * sum_i J(x_i) J(x_i)^T,    J(x) = df(x)/dx in R^{d x K}.

For a kernel machine ``f(z) = alpha k(X_train, z)`` the Jacobian has a closed
form, which :func:`grad_predictor` and :func:`agop` use. :func:`agop_fd`
recomputes the same quantity from central differences of predictions only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabelMatrix
from .linalg import LinalgError, as_matrix, psd_sqrt, spd_solve
from .parallel import chunks, map_ordered, ordered_sum

KERNEL_KINDS = ("laplace", "gaussian", "linear")

_COINCIDENT = 1e-12
_AGOP_CHUNK = 32


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "laplace"
    bandwidth: float = 2.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind != "linear" and not self.bandwidth > 0:
            raise ValueError("kernel bandwidth must be positive")


@dataclass(frozen=True, eq=False)
class KrrModel:
    train_X: np.ndarray
    alpha: np.ndarray
    spec: KernelSpec
    ridge: float
    jitter: float

    @property
    def K(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True, eq=False)
class AgopMatrix:
    M: np.ndarray
    sqrtM: np.ndarray


def _distances(X: np.ndarray, Z: np.ndarray, same: bool) -> np.ndarray:
    """Euclidean distances between columns, exact for near-coincident pairs."""
    xx = np.einsum("ij,ij->j", X, X)
    zz = np.einsum("ij,ij->j", Z, Z)
    d2 = xx[:, None] + zz[None, :] - 2.0 * (X.T @ Z)
    np.maximum(d2, 0.0, out=d2)
    # the expansion loses all relative accuracy when points nearly coincide
    close = d2 < 1e-8 * (xx[:, None] + zz[None, :])
    if same:
        np.fill_diagonal(close, False)
        np.fill_diagonal(d2, 0.0)
    ii, jj = np.nonzero(close)
    if ii.size:
        diff = X[:, ii] - Z[:, jj]
        d2[ii, jj] = np.einsum("ij,ij->j", diff, diff)
    return np.sqrt(d2)


def _kernel_from_dist(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    if spec.kind == "laplace":
        return np.exp(-r / spec.bandwidth)
    return np.exp(-(r * r) / (2.0 * spec.bandwidth**2))


def kernel_matrix(spec: KernelSpec, X, Z=None) -> np.ndarray:
    """Kernel evaluations between the columns of X and Z, shape ``(N_X, N_Z)``.

    laplace: exp(-||x - z|| / L); gaussian: exp(-||x - z||^2 / (2 L^2));
    linear: x^T z. With ``Z`` omitted the diagonal of a radial kernel is
    exactly 1.
    """
    X = as_matrix(X, "X")
    same = Z is None or Z is X
    Z = X if Z is None else as_matrix(Z, "Z")
    if X.shape[0] != Z.shape[0]:
        raise ValueError(f"dimension mismatch: {X.shape[0]} vs {Z.shape[0]}")
    if spec.kind == "linear":
        return X.T @ Z
    return _kernel_from_dist(spec, _distances(X, Z, same))


def krr_fit(X, Y, spec: KernelSpec, ridge: float = 0.0) -> KrrModel:
    """Coefficients ``alpha = Y (k(X, X) + ridge I)^{-1}``."""
    X = as_matrix(X, "X")
    Y = Y.Y if isinstance(Y, LabelMatrix) else as_matrix(Y, "Y")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if Y.shape[1] != X.shape[1]:
        raise ValueError(f"Y has {Y.shape[1]} columns, X has {X.shape[1]}")
    k = kernel_matrix(spec, X)
    if ridge:
        k = k + ridge * np.eye(k.shape[0])
    sol, jitter = spd_solve(k, Y.T)
    return KrrModel(X, np.ascontiguousarray(sol.T), spec, float(ridge), jitter)


def krr_predict(model: KrrModel, Z) -> np.ndarray:
    Z = as_matrix(Z, "Z")
    if Z.shape[0] != model.train_X.shape[0]:
        raise ValueError(
            f"dimension mismatch: model expects {model.train_X.shape[0]} rows, got {Z.shape[0]}"
        )
    return model.alpha @ kernel_matrix(model.spec, model.train_X, Z)


def _grad_weights(model: KrrModel, Z: np.ndarray) -> np.ndarray:
    """Per-pair scalar ``w_ij`` with grad_z k(x_i, z_j) = w_ij (x_i - z_j)."""
    spec = model.spec
    r = _distances(model.train_X, Z, same=False)
    k = _kernel_from_dist(spec, r)
    if spec.kind == "gaussian":
        return k / spec.bandwidth**2
    # laplace: zero subgradient at coincident points
    w = np.zeros_like(r)
    ok = r >= _COINCIDENT
    w[ok] = k[ok] / (spec.bandwidth * r[ok])
    return w


def grad_predictor(model: KrrModel, z) -> np.ndarray:
    """Transposed Jacobian of the predictor at ``z``, shape ``(d, K)``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    X = model.train_X
    if z.shape[0] != X.shape[0]:
        raise ValueError(f"dimension mismatch: {z.shape[0]} vs {X.shape[0]}")
    if model.spec.kind == "linear":
        return X @ model.alpha.T
    w = _grad_weights(model, z[:, None])[:, 0]
    return X @ (w[:, None] * model.alpha.T) - np.outer(z, model.alpha @ w)


def _agop_block(model: KrrModel, Z: np.ndarray) -> np.ndarray:
    """Sum of J J^T over the columns of Z (unnormalized)."""
    X, alpha = model.train_X, model.alpha
    w = _grad_weights(model, Z)
    s = Z.shape[1]
    K = alpha.shape[0]
    coef = w[:, :, None] * alpha.T[:, None, :]  # (N, s, K)
    J = (X @ coef.reshape(X.shape[1], s * K)).reshape(X.shape[0], s, K)
    J -= Z[:, :, None] * (alpha @ w).T[None, :, :]
    J = J.reshape(X.shape[0], s * K)
    return J @ J.T


def agop(model: KrrModel, X=None, threads: int | None = None) -> AgopMatrix:
    """Average gradient outer product of the fitted predictor over X.

    Defaults to the training inputs. The reduction runs over fixed chunks of
    samples, summed in order, so the result does not depend on ``threads``.
    """
    X = model.train_X if X is None else as_matrix(X, "X")
    if X.shape[0] != model.train_X.shape[0]:
        raise ValueError("dimension mismatch between model and X")
    N = X.shape[1]
    if model.spec.kind == "linear":
        G = model.train_X @ model.alpha.T
        M = G @ G.T
    else:
        parts = map_ordered(
            lambda sl: _agop_block(model, X[:, sl]),
            chunks(N, _AGOP_CHUNK),
            threads,
        )
        M = ordered_sum(parts) / N
    M = 0.5 * (M + M.T)
    return AgopMatrix(M, psd_sqrt(M))


def agop_fd(model: KrrModel, X=None, h: float = 1e-4) -> AgopMatrix:
    """AGOP from central-difference Jacobians of :func:`krr_predict`."""
    if not h > 0:
        raise ValueError("step h must be positive")
    X = model.train_X if X is None else as_matrix(X, "X")
    d, N = X.shape
    M = np.zeros((d, d))
    eye = h * np.eye(d)
    for j in range(N):
        x = X[:, j : j + 1]
        Jt = (krr_predict(model, x + eye) - krr_predict(model, x - eye)) / (2.0 * h)
        M += Jt.T @ Jt
    M /= N
    M = 0.5 * (M + M.T)
    try:
        root = psd_sqrt(M)
    except LinalgError:
        # differencing noise can push tiny eigenvalues slightly negative
        root = psd_sqrt(M, clamp_tol=1e-6)
    return AgopMatrix(M, root)
