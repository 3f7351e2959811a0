"""Minimal dense numeric kernels: small MLPs with hand-derived gradients,
plain SGD, and Lloyd's k-means.

Matrices are plain row-major numpy arrays; trainable parameters default to
float32. Tests that verify gradients against finite differences build models
in float64, where the central-difference oracle is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {what}")


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                 scale: float = 0.01, dtype=np.float32) -> np.ndarray:
    """Symmetric uniform init used for embedding-like tables."""
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def init_layer_weight(rng: np.random.Generator, fan_out: int, fan_in: int,
                      dtype=np.float32) -> np.ndarray:
    """Per-layer scaled uniform init, range 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    """Fully connected network; weights[l] has shape (out_l, in_l)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ValueError("weights, biases, activations must have one entry per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input dim {self.weights[l].shape[1]} != "
                                 f"layer {l - 1} output dim {self.weights[l - 1].shape[0]}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def create(cls, layer_sizes: list[int], activations: list[str],
               rng: np.random.Generator, dropout: float = 0.0, dtype=np.float32) -> "Mlp":
        if len(activations) != len(layer_sizes) - 1:
            raise ValueError("need one activation per layer transition")
        weights = [init_layer_weight(rng, layer_sizes[l + 1], layer_sizes[l], dtype)
                   for l in range(len(layer_sizes) - 1)]
        biases = [np.zeros(layer_sizes[l + 1], dtype=dtype) for l in range(len(layer_sizes) - 1)]
        return cls(weights, biases, list(activations), dropout)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations), self.dropout)

    def param_bytes(self) -> int:
        return sum(p.size for p in self.params()) * 4


@dataclass
class MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    squeeze: bool = False
    n_layers: int = 0


def mlp_forward(model: Mlp, x: np.ndarray, mode: str = "eval",
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, MlpCache]:
    """Forward pass over a single vector or a (batch, dim) matrix.

    Returns the output and a cache sufficient for exact backprop. Dropout is
    applied to hidden activations in train mode only, with masks drawn from
    ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(x)
    check_finite(x, "mlp input")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != model.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != model input dim {model.in_dim}")

    train = mode == "train" and model.dropout > 0.0
    if train and rng is None:
        raise ValueError("train mode with dropout requires an rng")

    cache = MlpCache(squeeze=squeeze, n_layers=len(model.weights))
    keep = 1.0 - model.dropout
    h = x
    for l, (w, b, act) in enumerate(zip(model.weights, model.biases, model.activations)):
        cache.inputs.append(h)
        z = h @ w.T + b
        a = _act(act, z)
        cache.outputs.append(a)
        last = l == len(model.weights) - 1
        if train and not last:
            mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
            cache.masks.append(mask)
            h = a * mask
        else:
            cache.masks.append(None)
            h = a
    out = h[0] if squeeze else h
    return out, cache


def mlp_backward(model: Mlp, cache: MlpCache, output_grad: np.ndarray
                 ) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Gradients of a scalar loss w.r.t. weights, biases, and the input.

    ``output_grad`` is dL/doutput with the same shape the forward produced.
    """
    if cache.n_layers != len(model.weights):
        raise ValueError("cache does not match model")
    g = np.asarray(output_grad)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise ValueError(f"output_grad shape {g.shape} != forward output shape "
                         f"{cache.outputs[-1].shape}")

    w_grads: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    for l in range(len(model.weights) - 1, -1, -1):
        mask = cache.masks[l]
        if mask is not None:
            g = g * mask
        a = cache.outputs[l]
        act = model.activations[l]
        if act == "relu":
            gz = g * (a > 0)
        elif act == "sigmoid":
            gz = g * a * (1.0 - a)
        else:
            gz = g
        w_grads[l] = gz.T @ cache.inputs[l]
        b_grads[l] = gz.sum(axis=0)
        g = gz @ model.weights[l]
    input_grad = g[0] if cache.squeeze else g
    return w_grads, b_grads, input_grad


def sgd_step(params, grads, lr: float):
    """p' = p - lr*g, elementwise; accepts one array or a list of arrays."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if isinstance(params, np.ndarray):
        grads = np.asarray(grads, dtype=params.dtype)
        if grads.shape != params.shape:
            raise ValueError(f"grad shape {grads.shape} != param shape {params.shape}")
        return params - lr * grads
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    return [sgd_step(p, g, lr) for p, g in zip(params, grads)]


def kmeans(points: np.ndarray, k: int, iters: int = 10,
           rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with deterministic lowest-index tie-breaking.

    Initial centroids are sampled without replacement from the points. If k
    exceeds the number of distinct points, the distinct points are used and
    the remaining centroids are padded with copies (not an error); padded
    duplicates simply attract no assignments. Clusters that end an iteration
    empty keep their previous centroid.
    """
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.issubdtype(points.dtype, np.floating):
        points = points.astype(np.float64)
    if rng is None:
        rng = np.random.default_rng(0)

    distinct = np.unique(points, axis=0)
    if k > distinct.shape[0]:
        reps = -(-k // distinct.shape[0])  # ceil
        centroids = np.tile(distinct, (reps, 1))[:k].copy()
    else:
        idx = rng.choice(points.shape[0], size=k, replace=False)
        centroids = points[np.sort(idx)].copy()

    for _ in range(iters):
        assignments = _nearest(points, centroids)
        for j in range(k):
            sel = assignments == j
            if sel.any():
                centroids[j] = points[sel].mean(axis=0)
    assignments = _nearest(points, centroids)
    return centroids, assignments


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first (lowest-index) minimiser, which is the tie rule.
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def kmeans_objective(points: np.ndarray, centroids: np.ndarray,
                     assignments: np.ndarray) -> float:
    return float(((points - centroids[assignments]) ** 2).sum())
