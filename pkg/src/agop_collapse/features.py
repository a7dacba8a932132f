"""Untrained random feature maps.

A :class:`FeatureMapSpec` is a recipe, not a sample: the weights are drawn
from ``seed`` each time the map is applied, so a stored spec replays the
exact same map at prediction time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .linalg import as_matrix

FEATURE_KINDS = ("relu", "rff-laplacian")


@dataclass(frozen=True)
class FeatureMapSpec:
    kind: str = "relu"
    width: int = 1024
    bandwidth: float = 0.05  # rff only
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if self.width < 1:
            raise ValueError("feature width must be >= 1")
        if self.kind == "rff-laplacian" and not self.bandwidth > 0:
            raise ValueError("rff bandwidth must be positive")

    def with_seed(self, seed: int) -> "FeatureMapSpec":
        return replace(self, seed=int(seed))


def relu_weights(spec: FeatureMapSpec, d: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return rng.normal(0.0, math.sqrt(2.0 / spec.width), size=(spec.width, d))


def relu_feature_map(spec: FeatureMapSpec, X) -> np.ndarray:
    """``max(0, W X)`` with ``W_ij ~ N(0, 2/D)`` and no bias."""
    X = as_matrix(X, "X")
    W = relu_weights(spec, X.shape[0])
    return np.maximum(W @ X, 0.0)


def rff_weights(spec: FeatureMapSpec, d: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    # Bochner: the l1-Laplacian kernel factorizes over coordinates and each
    # factor's spectral density is Cauchy with scale 1/sigma
    W = rng.standard_cauchy(size=(spec.width, d)) / spec.bandwidth
    b = rng.uniform(0.0, 2.0 * math.pi, size=(spec.width, 1))
    return W, b


def rff_laplacian_map(spec: FeatureMapSpec, X) -> np.ndarray:
    """Random Fourier features whose inner products approximate exp(-||x - z||_1 / sigma)."""
    X = as_matrix(X, "X")
    W, b = rff_weights(spec, X.shape[0])
    return math.sqrt(2.0 / spec.width) * np.cos(W @ X + b)


def apply_feature_map(spec: FeatureMapSpec, X) -> np.ndarray:
    if spec.kind == "relu":
        return relu_feature_map(spec, X)
    return rff_laplacian_map(spec, X)


def arccos_expected_inner(r: float) -> float:
    """E[relu(Wx)^T relu(Wy)] for unit x, y with x^T y = r and W ~ N(0, 2/D).

    Equals (sin t + (pi - t) cos t) / pi with t = arccos(r).
    """
    if abs(r) > 1.0:
        raise ValueError(f"correlation {r} outside [-1, 1]")
    t = math.acos(r)
    return (math.sin(t) + (math.pi - t) * math.cos(t)) / math.pi


def laplacian_l1_kernel(x, z, bandwidth: float) -> float:
    diff = np.asarray(x, dtype=float) - np.asarray(z, dtype=float)
    return float(np.exp(-np.abs(diff).sum() / bandwidth))
