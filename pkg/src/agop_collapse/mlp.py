"""A biasless ReLU MLP trained with plain minibatch SGD on MSE.

Besides training, the module exposes the quantities used to study collapse
inside the network: Jacobians of the outputs with respect to each layer
input, the per-layer AGOP, its correlation with the neural feature matrix
``W_l^T W_l``, and the NC1 of each layer's input split across the SVD of
``W_l`` (see :func:`agop_collapse.collapse.svd_stage_nc1`).

Layers are 1-based: ``W_l = model.weights[l - 1]`` maps the layer-l input
``x^l`` to the pre-activation ``h^l``; ``x^1`` is the data and ``W_{L+1}`` is
the linear readout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collapse import relu, svd_stage_nc1
from .linalg import as_matrix, pearson_flat, psd_sqrt
from .parallel import chunks, map_ordered, ordered_sum

DIVERGENCE_FACTOR = 1e6
_AGOP_CHUNK = 64


class TrainingDiverged(RuntimeError):
    pass


@dataclass(eq=False)
class MlpModel:
    weights: list[np.ndarray]
    widths: list[int]
    init_scale: float

    @property
    def depth(self) -> int:
        """Number of hidden (ReLU) layers L."""
        return len(self.weights) - 1

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], list(self.widths), self.init_scale)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # x^1 .. x^{L+1}
    pre: list[np.ndarray]  # h^1 .. h^L


@dataclass(frozen=True)
class LayerReport:
    layer_index: int
    nc1_input: float
    nc1_svt: float
    nc1_full: float
    nc1_phi: float
    nfa_rho: float


def mlp_init(widths, init_scale: float = 0.3, seed: int = 0) -> MlpModel:
    """Hidden layers: N(0, (init_scale / sqrt(fan_in))^2).

    The readout keeps the usual fan-in uniform default, U(-1/sqrt(fan_in),
    1/sqrt(fan_in)), independent of ``init_scale``.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError("need at least two positive widths")
    if init_scale < 0:
        raise ValueError("init_scale must be >= 0")
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(widths[:-2], widths[1:-1]):
        weights.append(rng.normal(0.0, init_scale / math.sqrt(fan_in), size=(fan_out, fan_in)))
    b = 1.0 / math.sqrt(widths[-2])
    weights.append(rng.uniform(-b, b, size=(widths[-1], widths[-2])))
    return MlpModel(weights, widths, float(init_scale))


def mlp_forward(model: MlpModel, X) -> tuple[np.ndarray, ForwardCache]:
    X = as_matrix(X, "X")
    if X.shape[0] != model.widths[0]:
        raise ValueError(f"input has {X.shape[0]} rows, network expects {model.widths[0]}")
    inputs, pre = [X], []
    x = X
    for W in model.weights[:-1]:
        h = W @ x
        pre.append(h)
        x = relu(h)
        inputs.append(x)
    return model.weights[-1] @ x, ForwardCache(inputs, pre)


def mse(F: np.ndarray, Y: np.ndarray) -> float:
    """Mean over all N*K entries."""
    R = F - Y
    return float(np.mean(R * R))


def mlp_loss(model: MlpModel, X, Y) -> float:
    return mse(mlp_forward(model, X)[0], np.asarray(Y, dtype=float))


def mlp_grad(model: MlpModel, X, Y) -> list[np.ndarray]:
    """Backpropagated gradients of :func:`mse`; relu'(0) = 0."""
    F, cache = mlp_forward(model, X)
    Y = as_matrix(Y, "Y")
    if Y.shape != F.shape:
        raise ValueError(f"Y has shape {Y.shape}, outputs are {F.shape}")
    delta = 2.0 * (F - Y) / F.size
    grads = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grads[i] = delta @ cache.inputs[i].T
        if i:
            delta = (model.weights[i].T @ delta) * (cache.pre[i - 1] > 0)
    return grads


def sgd_train(
    model: MlpModel,
    X,
    Y,
    lr: float,
    epochs: int,
    batch_size: int,
    seed: int = 0,
    callback=None,
) -> tuple[MlpModel, list[float]]:
    """Minibatch SGD, updating ``model`` in place.

    The returned history holds the full-data loss before training followed by
    one value per epoch. ``callback(epoch, model, loss)`` runs after epoch 0
    (untrained) and after every epoch.
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    N = X.shape[1]
    rng = np.random.default_rng(seed)
    loss0 = mlp_loss(model, X, Y)
    history = [loss0]
    if callback is not None:
        callback(0, model, loss0)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(N)
        # overflow inside a diverging epoch is reported by the check below
        with np.errstate(over="ignore", invalid="ignore"):
            for sl in chunks(N, batch_size):
                idx = order[sl]
                grads = mlp_grad(model, X[:, idx], Y[:, idx])
                for W, g in zip(model.weights, grads):
                    W -= lr * g
            loss = mlp_loss(model, X, Y)
        history.append(loss)
        if not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * loss0:
            raise TrainingDiverged(f"loss {loss:.4g} at epoch {epoch} (initial {loss0:.4g})")
        if callback is not None:
            callback(epoch, model, loss)
    return model, history


def _check_layer(model: MlpModel, l: int, allow_readout: bool = True):
    top = model.depth + 1 if allow_readout else model.depth
    if not 1 <= l <= top:
        raise ValueError(f"layer index {l} outside 1..{top}")


def _batch_jacobians(model: MlpModel, pre: list[np.ndarray], l: int) -> np.ndarray:
    """df/dx^l for every column, shape (N, K, d_l); ``pre`` holds h^l..h^L."""
    N = pre[0].shape[1] if pre else 1
    B = np.broadcast_to(model.weights[-1], (N,) + model.weights[-1].shape)
    for j in range(model.depth, l - 1, -1):
        mask = (pre[j - l] > 0).T  # (N, width)
        B = (B * mask[:, None, :]) @ model.weights[j - 1]
    return np.asarray(B)


def layer_jacobian(model: MlpModel, x, l: int) -> np.ndarray:
    """Transposed Jacobian of the outputs with respect to x^l, shape (d_l, K)."""
    _check_layer(model, l)
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    _, cache = mlp_forward(model, x)
    return _batch_jacobians(model, cache.pre[l - 1 :], l)[0].T


def network_agop(model: MlpModel, X, l: int, threads: int | None = None) -> np.ndarray:
    """(1/N) sum_i J_l(x_i) J_l(x_i)^T with J_l the transposed layer-l Jacobian."""
    _check_layer(model, l)
    _, cache = mlp_forward(model, X)
    N = cache.inputs[0].shape[1]

    def block(sl):
        B = _batch_jacobians(model, [h[:, sl] for h in cache.pre[l - 1 :]], l)
        if l == model.depth + 1:
            B = np.broadcast_to(B[:1], (sl.stop - sl.start,) + B.shape[1:])
        return np.einsum("nki,nkj->ij", B, B)

    M = ordered_sum(map_ordered(block, chunks(N, _AGOP_CHUNK), threads)) / N
    return 0.5 * (M + M.T)


def network_agop_nfa(model: MlpModel, X, l: int, threads: int | None = None):
    """``(M_l, rho_l)`` with rho_l = pearson(W_l^T W_l, M_l^{1/2})."""
    _check_layer(model, l, allow_readout=False)
    M = network_agop(model, X, l, threads)
    W = model.weights[l - 1]
    return M, pearson_flat(W.T @ W, psd_sqrt(M, clamp_tol=1e-8))


def layer_reports(model: MlpModel, X, labels, K: int | None = None, threads: int | None = None):
    """One :class:`LayerReport` per hidden layer."""
    _, cache = mlp_forward(model, X)
    out = []
    for l in range(1, model.depth + 1):
        st = svd_stage_nc1(cache.inputs[l - 1], model.weights[l - 1], labels, K)
        _, rho = network_agop_nfa(model, X, l, threads)
        out.append(LayerReport(l, st.nc1_input, st.nc1_svt, st.nc1_full, st.nc1_phi, rho))
    return out


def svt_fraction(reports) -> float:
    """Share of the summed per-layer log-NC1 drop that happens at S V^T.

    Per layer the total drop is log nc1_input - log nc1_phi and the S V^T
    part is log nc1_input - log nc1_svt.
    """
    svt = sum(math.log(r.nc1_input) - math.log(r.nc1_svt) for r in reports)
    total = sum(math.log(r.nc1_input) - math.log(r.nc1_phi) for r in reports)
    if total == 0:
        raise ValueError("no net NC1 reduction across layers")
    return svt / total
