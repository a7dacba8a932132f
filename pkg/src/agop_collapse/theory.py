"""Gram-space checks of the collapse theory.

Two results are exercised numerically:

* the asymptotic recursion, in which predictor and feature-map kernels are
  linear kernels plus identity perturbations ``lhat`` and ``lmap``. The data
  Gram after the AGOP map is

      Gtilde = kappa^{-1} G (G + lhat I)^{-1} Y^T Y (G + lhat I)^{-1} G

  and the feature map adds ``lmap I``. Residuals ``||Gtilde - Y^T Y||``
  should contract geometrically to an O(lhat^2 / lmap^2) plateau;
* kernel learning: over PSD, entrywise non-negative kernel matrices with
  unit diagonal, the ridge objective minimized over coefficients is best at
  the collapsed kernel ``Y^T Y``.

All labels here are zero-one, class-balanced and sorted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import gen_gaussian_classes
from .linalg import LinalgError, as_matrix, spd_solve, spectral_norm

KAPPA_RULES = ("additive", "fixed-point")


class TheoryError(ValueError):
    pass


def balanced_labels(K: int, n: int) -> np.ndarray:
    """Zero-one label matrix I_K kron 1_n^T, shape (K, K n)."""
    return np.kron(np.eye(K), np.ones((1, n)))


def kappa(lhat: float, lmap: float, n: int | None = None, rule: str = "additive") -> float:
    """Per-layer rescaling of the AGOP-mapped Gram.

    ``additive``: 1 - 2 lhat (1 + 1/lmap).
    ``fixed-point``: 1 - 2 lhat / (n + lmap), the first-order shrinkage of
    Y^T Y at the collapsed fixed point A* = Y^T Y + lmap I, since
    (A*)^{-1} Y^T Y = Y^T Y / (n + lmap).
    """
    if rule == "additive":
        return 1.0 - 2.0 * lhat * (1.0 + 1.0 / lmap)
    if rule == "fixed-point":
        if n is None:
            raise TheoryError("the fixed-point kappa needs the class size n")
        return 1.0 - 2.0 * lhat / (n + lmap)
    raise TheoryError(f"unknown kappa rule {rule!r}")


def _class_size(Y: np.ndarray) -> int:
    counts = Y.sum(axis=1)
    return int(round(counts.max()))


def asymptotic_step(G, Y, lhat: float, lmap: float, kappa_rule: str = "additive"):
    """One layer of the Gram recursion; returns ``(Gtilde, Gnext)``."""
    G = as_matrix(G, "G")
    Y = as_matrix(Y, "Y")
    if lhat < 0 or not lmap > 0:
        raise TheoryError("need lhat >= 0 and lmap > 0")
    kap = kappa(lhat, lmap, _class_size(Y), kappa_rule)
    if kap <= 0:
        raise TheoryError(f"kappa = {kap:.6g} <= 0: lhat is too large for lmap")
    YtY = Y.T @ Y
    N = G.shape[0]
    try:
        # (G + lhat I)^{-1} G; commutes with G so it is symmetric
        S, _ = spd_solve(G + lhat * np.eye(N), G, jitters=(0.0,))
    except LinalgError as exc:
        raise TheoryError(f"Gram matrix is not positive definite: {exc}") from None
    Gt = S.T @ YtY @ S / kap
    Gt = 0.5 * (Gt + Gt.T)
    return Gt, Gt + lmap * np.eye(N)


def fixed_point_inverse(n: int, K: int, lmap: float):
    """``(A*, inv)`` with A* = Y^T Y + lmap I and its closed-form inverse

        inv = I / lmap - Y^T Y / (lmap (lmap + n)).
    """
    Y = balanced_labels(K, n)
    YtY = Y.T @ Y
    eye = np.eye(K * n)
    A_star = YtY + lmap * eye
    inv = eye / lmap - YtY / (lmap * (lmap + n))
    return A_star, inv


@dataclass(frozen=True)
class TheoryConfig:
    lhat: float = 1e-3
    lmap: float = 1.0
    n: int = 20
    K: int = 4
    depth: int = 15
    eps: float = 0.1
    lambda_phi: float = 0.05
    seed: int = 0
    kappa_rule: str = "fixed-point"

    def __post_init__(self):
        if self.lhat < 0 or not self.lmap > 0:
            raise TheoryError("need lhat >= 0 and lmap > 0")
        if not 0 < self.eps <= 1:
            raise TheoryError("eps must lie in (0, 1]")
        if not self.lambda_phi > 0:
            raise TheoryError("lambda_phi must be positive")
        if self.depth < 2:
            raise TheoryError("depth must be >= 2")
        if self.kappa_rule not in KAPPA_RULES:
            raise TheoryError(f"unknown kappa rule {self.kappa_rule!r}")


def initial_gram(cfg: TheoryConfig) -> np.ndarray:
    """Gram of a synthetic full-rank dataset with d = 2N."""
    N = cfg.K * cfg.n
    d = 2 * N
    ds = gen_gaussian_classes(cfg.K, cfg.n, d, separation=1.0, noise=1.0 / np.sqrt(d), seed=cfg.seed)
    return ds.X.T @ ds.X


@dataclass
class ContractionTrace:
    residuals: list[float]  # spectral norm, index 0 is the initial Gram
    residuals_fro: list[float]
    ratios: list[float]
    kappa: float
    kappa_rule: str
    condition: bool
    plateau: float
    c_fit: float
    passed: bool
    grams: list[np.ndarray] = field(default_factory=list, repr=False)


def regime_condition(cfg: TheoryConfig) -> bool:
    """Whether lhat satisfies lhat * 2/lmap * (1 + 1/lmap) * n < 1 - eps."""
    return cfg.lhat * 2.0 / cfg.lmap * (1.0 + 1.0 / cfg.lmap) * cfg.n < 1.0 - cfg.eps


def contraction_run(cfg: TheoryConfig, G0=None, keep_grams: bool = False) -> ContractionTrace:
    G = initial_gram(cfg) if G0 is None else as_matrix(G0, "G0")
    N = cfg.K * cfg.n
    if G.shape != (N, N):
        raise TheoryError(f"initial Gram must be {N}x{N}, got {G.shape}")
    lam_min = float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])
    if lam_min < cfg.lambda_phi:
        raise TheoryError(
            f"initial Gram min eigenvalue {lam_min:.4g} is below lambda_phi = {cfg.lambda_phi:g}"
        )
    Y = balanced_labels(cfg.K, cfg.n)
    YtY = Y.T @ Y
    res = [spectral_norm(G - YtY)]
    res_f = [float(np.linalg.norm(G - YtY))]
    grams = [G] if keep_grams else []
    for _ in range(cfg.depth - 1):
        Gt, G = asymptotic_step(G, Y, cfg.lhat, cfg.lmap, cfg.kappa_rule)
        res.append(spectral_norm(Gt - YtY))
        res_f.append(float(np.linalg.norm(Gt - YtY)))
        if keep_grams:
            grams.append(Gt)
    ratios = [b / a if a > 0 else 0.0 for a, b in zip(res[:-1], res[1:])]
    plateau = max(res[-3:])
    scale = cfg.lhat**2 / cfg.lmap**2
    c_fit = plateau / scale if scale > 0 else 0.0
    slack = c_fit * scale
    # layer l >= 2 in 1-based indexing is index >= 1 here
    passed = all(
        res[i + 1] <= (1.0 - cfg.eps) * res[i] + slack for i in range(1, len(res) - 1)
    )
    return ContractionTrace(
        residuals=res,
        residuals_fro=res_f,
        ratios=ratios,
        kappa=kappa(cfg.lhat, cfg.lmap, cfg.n, cfg.kappa_rule),
        kappa_rule=cfg.kappa_rule,
        condition=regime_condition(cfg),
        plateau=plateau,
        c_fit=c_fit,
        passed=passed,
        grams=grams,
    )


def geometric_until_plateau(residuals, max_ratio: float = 0.9, factor: float = 10.0) -> bool:
    """Every step shrinks by ``max_ratio`` while above ``factor`` times the plateau."""
    plateau = residuals[-1]
    for a, b in zip(residuals[:-1], residuals[1:]):
        if a <= factor * plateau:
            break
        if b > max_ratio * a:
            return False
    return True


# -- kernel learning --------------------------------------------------------


def krr_objective(A, k, Y, mu: float) -> float:
    """tr((Y - A k)(Y - A k)^T) + mu tr(k A^T A)."""
    A = as_matrix(A, "A")
    k = as_matrix(k, "k")
    Y = as_matrix(Y, "Y")
    if A.shape != Y.shape or k.shape != (Y.shape[1], Y.shape[1]):
        raise ValueError(f"shape mismatch: A {A.shape}, k {k.shape}, Y {Y.shape}")
    R = Y - A @ k
    return float(np.sum(R * R) + mu * np.trace(k @ A.T @ A))


def optimal_coefficients(k, Y, mu: float) -> np.ndarray:
    """Row-wise minimizer A = Y (k + mu I)^{-1} for fixed k."""
    k = as_matrix(k, "k")
    sol, _ = spd_solve(k + mu * np.eye(k.shape[0]), as_matrix(Y, "Y").T)
    return sol.T


def conditional_opt_gain(k, Y, mu: float) -> float:
    """sum_c Y_c^T (k + mu I)^{-1} k Y_c, the objective decrease from A = 0."""
    k = as_matrix(k, "k")
    Y = as_matrix(Y, "Y")
    if not mu > 0:
        raise ValueError("mu must be positive")
    sol, _ = spd_solve(k + mu * np.eye(k.shape[0]), k @ Y.T)
    return float(np.sum(Y.T * sol))


def closed_form_gain(K: int, n: int, mu: float) -> float:
    return K * n * n / (n + mu)


def is_feasible(k: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(
        np.allclose(k, k.T, atol=tol)
        and np.all(np.diag(k) == 1.0)
        and np.all(k >= 0.0)
        and np.linalg.eigvalsh(k)[0] >= -tol
    )


def _repair(k: np.ndarray) -> np.ndarray:
    """Mix with I just enough to make k PSD; keeps unit diagonal and k >= 0."""
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    lam = np.linalg.eigvalsh(k)[0]
    if lam < 0:
        t = -lam / (1.0 - lam) * (1.0 + 1e-9)
        k = (1.0 - t) * k + t * np.eye(k.shape[0])
        np.fill_diagonal(k, 1.0)
    return k


def project_feasible(k: np.ndarray, iters: int = 50) -> np.ndarray:
    """Alternate eigenvalue clamp, entry clamp at 0 and diagonal reset."""
    k = 0.5 * (k + k.T)
    for _ in range(iters):
        w, V = np.linalg.eigh(k)
        k = (V * np.clip(w, 0.0, None)) @ V.T
        k = 0.5 * (k + k.T)
        np.clip(k, 0.0, None, out=k)
        np.fill_diagonal(k, 1.0)
    return _repair(k)


def _partition_kernel(groups: np.ndarray) -> np.ndarray:
    return (groups[:, None] == groups[None, :]).astype(float)


def random_feasible_kernels(N: int, count: int, rng: np.random.Generator):
    """Yield feasible kernel matrices of size N.

    Half are convex combinations of partition (block-of-ones) kernels, which
    are exactly feasible; the rest are noisy matrices pushed back into the
    feasible set by :func:`project_feasible`.
    """
    for i in range(count):
        if i % 2 == 0:
            m = int(rng.integers(1, 5))
            w = rng.dirichlet(np.ones(m))
            k = sum(
                wj * _partition_kernel(rng.integers(0, int(rng.integers(1, N + 1)), size=N))
                for wj in w
            )
            k = 0.5 * (k + k.T)
            np.fill_diagonal(k, 1.0)
        else:
            B = rng.uniform(0.0, 1.0, size=(N, N)) * rng.uniform(0.2, 1.0)
            k = project_feasible(0.5 * (B + B.T))
        yield k


@dataclass
class KernelSearchResult:
    best_gain: float
    best_k: np.ndarray
    closed_form: float
    gap: float  # closed_form - best_gain
    n_candidates: int
    max_excess: float  # max over candidates of gain - closed_form


def search_kernel_opt(
    K: int, n: int, mu: float, trials: int, seed: int = 0, include_optimum: bool = True
) -> KernelSearchResult:
    """Random search over feasible kernels for the largest conditional gain."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    Y = balanced_labels(K, n)
    N = K * n
    rng = np.random.default_rng(seed)
    candidates = list(random_feasible_kernels(N, trials, rng))
    if include_optimum:
        candidates.append(Y.T @ Y)
    cf = closed_form_gain(K, n, mu)
    best_gain, best_k, excess = -np.inf, None, -np.inf
    for k in candidates:
        g = conditional_opt_gain(k, Y, mu)
        excess = max(excess, g - cf)
        if g > best_gain:
            best_gain, best_k = g, k
    return KernelSearchResult(best_gain, best_k, cf, cf - best_gain, len(candidates), excess)


def two_parameter_kernel(K: int, n: int, within: float, cross: float) -> np.ndarray:
    """Unit-diagonal kernel with constant within-class and cross-class entries."""
    Y = balanced_labels(K, n)
    same = Y.T @ Y
    k = within * same + cross * (1.0 - same)
    np.fill_diagonal(k, 1.0)
    return k


def two_parameter_grid(K: int, n: int, mu: float, steps: int = 201):
    """Grid search over (within, cross) in [0, 1]^2 restricted to PSD kernels.

    Returns ``(within*, cross*, best_gain)``.
    """
    Y = balanced_labels(K, n)
    grid = np.linspace(0.0, 1.0, steps)
    best = (None, None, -np.inf)
    for a in grid:
        for b in grid:
            k = two_parameter_kernel(K, n, a, b)
            if np.linalg.eigvalsh(k)[0] < -1e-12:
                continue
            g = conditional_opt_gain(k + 0.0, Y, mu)
            if g > best[2]:
                best = (float(a), float(b), g)
    return best
