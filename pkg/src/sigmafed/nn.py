"""Dense-network substrate: MLPs with exact reverse-mode gradients, Adam,
gradient clipping, reparameterized Gaussian sampling, and a splittable RNG.

All tensors are contiguous float64 numpy arrays: vectors of shape (n,)
and matrices of shape (rows, cols). No autodiff tape is involved; each
network exposes its own vector-Jacobian products and larger objectives
chain them by hand.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "SeededRng",
    "DenseLayer",
    "Mlp",
    "mlp_forward",
    "backprop",
    "AdamState",
    "adam_step",
    "clip_grad_norm",
    "reparam_sample",
]


def _key_to_int(key) -> int:
    """Map an int or string key onto a non-negative 64-bit stream index."""
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"rng derivation keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")
    raise TypeError(f"rng derivation key must be int or str, got {type(key).__name__}")


class SeededRng:
    """Deterministic, splittable random stream.

    A stream is identified by a 64-bit seed plus a derivation path of
    integer/string keys; identical (seed, path) pairs produce identical
    draw sequences. `derive` creates an independent child stream without
    consuming state from the parent, which is how dataset generation,
    training, and the federated rounds key their noise.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        self._gen = np.random.default_rng(
            np.random.SeedSequence([self.seed, *self._path])
        )

    def derive(self, *keys) -> "SeededRng":
        path = self._path + tuple(_key_to_int(k) for k in keys)
        return SeededRng(self.seed, path)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self._path})"


@dataclass
class DenseLayer:
    """Affine map x -> weights @ x + bias with weights of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("dense layer expects 2-d weights and 1-d bias")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match "
                f"weight rows {self.weights.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    """Stack of dense layers with ReLU between layers and identity output."""

    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects input dim {self.layers[i].in_dim} but "
                    f"layer {i - 1} produces {self.layers[i - 1].out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def init_dense(rng: SeededRng, out_dim: int, in_dim: int) -> DenseLayer:
    """Uniform fan-based init in +-sqrt(6/(fan_in+fan_out)), zero bias."""
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-bound, bound, (out_dim, in_dim))
    return DenseLayer(weights=w, bias=np.zeros(out_dim))


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward pass for a single vector; no activation on the final layer."""
    if x.shape != (net.in_dim,):
        raise ShapeError(
            f"input length {x.shape} does not match layer 0 in-dim {net.in_dim}"
        )
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        x = layer.weights @ x + layer.bias
        if i != last:
            x = np.maximum(x, 0.0)
    return x


def _forward_cached(net: Mlp, x: np.ndarray):
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    inputs = []
    preacts = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        if x.shape[-1] != layer.in_dim:
            raise ShapeError(
                f"input dim {x.shape[-1]} does not match layer {i} "
                f"in-dim {layer.in_dim}"
            )
        inputs.append(x)
        z = x @ layer.weights.T + layer.bias
        preacts.append(z)
        x = np.maximum(z, 0.0) if i != last else z
    return x, (inputs, preacts)


def _backward_cached(net: Mlp, cache, upstream: np.ndarray):
    """Reverse pass from a cached forward.

    Works for a single vector or a batch (rows are data points); batched
    weight gradients are summed over the batch. Returns ([(dW, db), ...],
    input gradient).
    """
    inputs, preacts = cache
    batched = upstream.ndim == 2
    grads = [None] * len(net.layers)
    g = upstream
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if i != len(net.layers) - 1:
            g = g * (preacts[i] > 0.0)
        if batched:
            dw = g.T @ inputs[i]
            db = g.sum(axis=0)
        else:
            dw = np.outer(g, inputs[i])
            db = g.copy()
        grads[i] = (dw, db)
        g = g @ layer.weights
    return grads, g


def backprop(net: Mlp, x: np.ndarray, upstream_grad: np.ndarray):
    """Exact gradients of (output . upstream_grad) w.r.t. parameters and input.

    Returns (param_grads, input_grad) where param_grads is a list of
    (dW, db) pairs in layer order.
    """
    if upstream_grad.shape != (net.out_dim,):
        raise ShapeError(
            f"upstream grad length {upstream_grad.shape} does not match "
            f"output dim {net.out_dim}"
        )
    _, cache = _forward_cached(net, x)
    return _backward_cached(net, cache, upstream_grad)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Affine forward for a vector or a batch of row vectors."""
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} does not match layer in-dim {layer.in_dim}")
    return x @ layer.weights.T + layer.bias


def dense_backward(layer: DenseLayer, x: np.ndarray, upstream: np.ndarray):
    """VJP of a single affine layer; returns ((dW, db), input_grad)."""
    if upstream.ndim == 2:
        dw = upstream.T @ x
        db = upstream.sum(axis=0)
    else:
        dw = np.outer(upstream, x)
        db = upstream.copy()
    return (dw, db), upstream @ layer.weights


class AdamState:
    """First/second-moment accumulators for a named set of parameter blocks."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """One Adam minimization step with bias correction; mutates params in place."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape mismatch for block '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in block '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all blocks jointly so the global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def reparam_sample(mu: np.ndarray, log_var: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """mu + exp(0.5 * log_var) * eps, elementwise."""
    if not (mu.shape == log_var.shape == eps.shape):
        raise ShapeError(
            f"length mismatch: mu {mu.shape}, log_var {log_var.shape}, eps {eps.shape}"
        )
    return mu + np.exp(0.5 * log_var) * eps
