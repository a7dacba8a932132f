"""Neural-collapse measurements.

NC1 is the trace ratio tr(Sigma_W) / tr(Sigma_B). NC2 compares the Gram
matrix of centered, unit-normalized class means with the simplex ETF and
with the identity. Both families of metrics, plus the centered-Gram view of
a representation, are computed from column-sample matrices and labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .data import DataError, class_means_of, global_mean
from .linalg import as_matrix

DEGENERATE_TRACE = 1e-14


class CollapseError(ValueError):
    pass


@dataclass(frozen=True)
class CollapseMetrics:
    nc1: float
    nc2_etf: float
    nc2_orth: float
    gram_residual: float


@dataclass(frozen=True, eq=False)
class ClassStats:
    """Class means, global mean and the two variability matrices.

    ``tr_w`` and ``tr_b`` are computed eagerly; the full ``d x d`` matrices
    only on request.
    """

    X: np.ndarray
    labels: np.ndarray
    class_means: np.ndarray  # (d, K)
    global_mean: np.ndarray  # (d,)
    tr_w: float
    tr_b: float

    @property
    def K(self) -> int:
        return self.class_means.shape[1]

    @cached_property
    def sigma_w(self) -> np.ndarray:
        R = self.X - self.class_means[:, self.labels]
        return R @ R.T / self.X.shape[1]

    @cached_property
    def sigma_b(self) -> np.ndarray:
        C = self.class_means - self.global_mean[:, None]
        return C @ C.T / self.K


def class_stats(X, labels, K: int | None = None, mean_mode: str = "class") -> ClassStats:
    X = as_matrix(X, "X")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    try:
        means = class_means_of(X, labels, K)
    except DataError as exc:
        raise CollapseError(str(exc)) from None
    mu_g = global_mean(X, labels, means.shape[1], mean_mode)
    R = X - means[:, labels]
    C = means - mu_g[:, None]
    tr_w = float(np.einsum("ij,ij->", R, R) / X.shape[1])
    tr_b = float(np.einsum("ij,ij->", C, C) / means.shape[1])
    return ClassStats(X, labels, means, mu_g, tr_w, tr_b)


def nc1(stats: ClassStats) -> float:
    if stats.tr_b < DEGENERATE_TRACE:
        raise CollapseError(
            f"between-class variability is degenerate (tr Sigma_B = {stats.tr_b:.3e})"
        )
    return stats.tr_w / stats.tr_b


def etf_gram(K: int) -> np.ndarray:
    """Gram of a K-point simplex ETF: (1 + 1/(K-1)) I - 1/(K-1) 11^T."""
    c = 1.0 / (K - 1)
    return (1.0 + c) * np.eye(K) - c * np.ones((K, K))


def simplex_etf(K: int, d: int, seed: int | None = None) -> np.ndarray:
    """K unit columns in R^d with pairwise inner products -1/(K-1)."""
    if d < K - 1:
        raise ValueError(f"a {K}-point simplex needs d >= {K - 1}")
    P = np.eye(K) - 1.0 / K
    P /= np.linalg.norm(P, axis=0)
    # isometric embedding of the (K-1)-dim span into R^d
    basis = np.linalg.svd(P)[0][:, : K - 1]
    coords = basis.T @ P
    if seed is None:
        Q = np.eye(d)[:, : K - 1]
    else:
        Q = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, K - 1)))[0]
    return Q @ coords


def normalized_centered_means(stats: ClassStats) -> np.ndarray:
    C = stats.class_means - stats.global_mean[:, None]
    norms = np.linalg.norm(C, axis=0)
    if np.any(norms <= 1e-12 * max(1.0, norms.max())):
        raise CollapseError("a centered class mean is zero")
    return C / norms


def nc2(stats: ClassStats) -> tuple[float, float]:
    """Frobenius distances of the normalized class-mean Gram to Sigma_ETF and to I."""
    if stats.K < 2:
        raise CollapseError("NC2 needs at least two classes")
    mbar = normalized_centered_means(stats)
    G = mbar.T @ mbar
    etf = float(np.linalg.norm(G - etf_gram(stats.K)))
    # orthogonality is only up to scale
    G_orth = G / np.mean(np.diag(G))
    orth = float(np.linalg.norm(G_orth - np.eye(stats.K)))
    return etf, orth


def centered_gram(X, labels, K: int | None = None, mean_mode: str = "class") -> np.ndarray:
    """Gram matrix of globally centered, unit-normalized columns."""
    X = as_matrix(X, "X")
    mu = global_mean(X, labels, K, mean_mode)
    Xc = X - mu[:, None]
    norms = np.linalg.norm(Xc, axis=0)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise CollapseError(f"column {int(bad[0])} coincides with the global mean")
    Xbar = Xc / norms
    G = Xbar.T @ Xbar
    G = 0.5 * (G + G.T)
    np.clip(G, -1.0, 1.0, out=G)
    np.fill_diagonal(G, 1.0)
    return G


def collapsed_gram(labels, K: int) -> np.ndarray:
    """Centered Gram of perfectly collapsed data with ETF class means."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return np.where(same, 1.0, -1.0 / (K - 1))


def gram_residual(G: np.ndarray, labels, K: int) -> float:
    """RMS entry deviation of a centered Gram from the collapsed pattern."""
    return float(np.linalg.norm(G - collapsed_gram(labels, K)) / G.shape[0])


def collapse_metrics(X, labels, K: int | None = None, mean_mode: str = "class") -> CollapseMetrics:
    stats = class_stats(X, labels, K, mean_mode)
    etf, orth = nc2(stats)
    G = centered_gram(X, labels, stats.K, mean_mode)
    return CollapseMetrics(nc1(stats), etf, orth, gram_residual(G, labels, stats.K))


@dataclass(frozen=True)
class StageReport:
    nc1_input: float
    nc1_svt: float
    nc1_full: float
    nc1_phi: float


def _stage_nc1(name: str, X, labels, K) -> float:
    try:
        return nc1(class_stats(X, labels, K))
    except CollapseError as exc:
        raise CollapseError(f"stage {name}: {exc}") from None


def relu(x):
    return np.maximum(x, 0.0)


def svd_stage_nc1(Xin, W, labels, K: int | None = None, nonlinearity=relu) -> StageReport:
    """NC1 through one dense layer split as W = U S V^T.

    Stages: the layer input, S V^T applied to it, the full linear map W (for
    the trace-invariance check) and the layer output phi(U S V^T x).
    """
    Xin = as_matrix(Xin, "Xin")
    W = as_matrix(W, "W")
    if W.shape[1] != Xin.shape[0]:
        raise ValueError(f"W has {W.shape[1]} columns, input has {Xin.shape[0]} rows")
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    SVtX = s[:, None] * (Vt @ Xin)
    out = nonlinearity(U @ SVtX) if nonlinearity is not None else U @ SVtX
    return StageReport(
        nc1_input=_stage_nc1("input", Xin, labels, K),
        nc1_svt=_stage_nc1("svt", SVtX, labels, K),
        nc1_full=_stage_nc1("full", W @ Xin, labels, K),
        nc1_phi=_stage_nc1("phi", out, labels, K),
    )
