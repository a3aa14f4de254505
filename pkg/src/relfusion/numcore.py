"""Minimal dense-network machinery for the trainable branches.

Everything runs in float64. Layers apply ``y = x @ W.T + b`` with a
rectifier between layers (never after the last), which is all the
relationship heads need. Gradients are exact reverse-mode; a central
finite-difference helper provides the independent check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(RuntimeError):
    """Raised when training produces non-finite values."""


@dataclass
class DenseLayer:
    """Affine layer: weights (out, in) and bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    """Stack of dense layers with a rectifier after all but the last."""

    layers: list[DenseLayer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def init_layer(in_dim: int, out_dim: int, rng: np.random.Generator) -> DenseLayer:
    """Rectifier-scaled init: weights ~ N(0, 2/in_dim), bias zero."""
    if in_dim <= 0 or out_dim <= 0:
        raise ValueError("layer dimensions must be positive")
    std = np.sqrt(2.0 / in_dim)
    weights = rng.normal(0.0, std, size=(out_dim, in_dim))
    return DenseLayer(weights=weights, bias=np.zeros(out_dim))


def init_mlp(dims: list[int], rng: np.random.Generator) -> Mlp:
    """Build an Mlp from a chain of dimensions, e.g. [22, 64, 64, 10]."""
    return Mlp([init_layer(a, b, rng) for a, b in zip(dims, dims[1:])])


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def layer_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return x @ layer.weights.T + layer.bias


def forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run the affine/rectifier chain.

    ``x`` is a single vector (in_dim,) or a batch (N, in_dim). Returns the
    output plus a cache sufficient for :func:`backward`.
    """
    single = x.ndim == 1
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != mlp.in_dim:
        raise ValueError(f"input dim {h.shape[1]} != mlp input dim {mlp.in_dim}")
    inputs = []
    preacts = []
    for i, layer in enumerate(mlp.layers):
        inputs.append(h)
        z = layer_forward(layer, h)
        preacts.append(z)
        h = relu(z) if i < len(mlp.layers) - 1 else z
    cache = {"inputs": inputs, "preacts": preacts, "single": single}
    return (h[0] if single else h), cache


def backward(
    mlp: Mlp, cache: dict, grad_out: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact reverse-mode gradients of :func:`forward`.

    Returns per-layer (dW, db) in layer order and the gradient with
    respect to the input.
    """
    if len(cache["inputs"]) != len(mlp.layers):
        raise ValueError("cache does not match the mlp it came from")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.layers)
    for i in range(len(mlp.layers) - 1, -1, -1):
        x = cache["inputs"][i]
        if g.shape != (x.shape[0], mlp.layers[i].out_dim):
            raise ValueError("gradient shape does not match cached activations")
        dw = g.T @ x
        db = g.sum(axis=0)
        grads[i] = (dw, db)
        g = g @ mlp.layers[i].weights
        if i > 0:
            g = g * (cache["preacts"][i - 1] > 0.0)
    return grads, (g[0] if cache["single"] else g)


def softmax(z: np.ndarray) -> np.ndarray:
    """Stabilized softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, target) -> tuple[np.ndarray, np.ndarray]:
    """Softmax cross-entropy loss and its gradient in the logits.

    Vector logits with an integer target give (scalar loss, vector grad);
    a (N, C) batch with N targets gives per-example losses and the (N, C)
    gradient of their sum-of-per-example losses (unscaled).
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    t = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if np.any(t < 0) or np.any(t >= z2.shape[1]):
        raise ValueError(f"target outside 0..{z2.shape[1] - 1}")
    m = z2.max(axis=1, keepdims=True)
    shifted = z2 - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    losses = lse - shifted[rows, t]
    grad = softmax(z2)
    grad[rows, t] -= 1.0
    if single:
        return losses[0], grad[0]
    return losses, grad


@dataclass
class OptimizerState:
    """Momentum-SGD state; velocity buffers are created lazily."""

    learning_rate: float
    momentum: float = 0.0
    velocities: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> None:
    """In-place update: v = momentum*v - lr*grad; param += v."""
    if not state.velocities:
        state.velocities = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise ValueError("params/grads/velocities length mismatch")
    for p, g, v in zip(params, grads, state.velocities):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        v *= state.momentum
        v -= state.learning_rate * g
        p += v


def fd_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise in x.

    Mutates entries of ``x`` temporarily, so ``fn`` must read the same
    array object.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case |a-n| / max(|a|, |n|, floor) over all entries.

    The floor keeps near-zero gradients from amplifying finite-difference
    round-off into spurious failures.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def layer_to_json(layer: DenseLayer) -> dict:
    return {"weights": layer.weights.tolist(), "bias": layer.bias.tolist()}


def layer_from_json(raw: dict) -> DenseLayer:
    return DenseLayer(
        weights=np.asarray(raw["weights"], dtype=np.float64),
        bias=np.asarray(raw["bias"], dtype=np.float64),
    )


def mlp_to_json(mlp: Mlp) -> dict:
    return {"layers": [layer_to_json(l) for l in mlp.layers]}


def mlp_from_json(raw: dict) -> Mlp:
    return Mlp([layer_from_json(l) for l in raw["layers"]])
