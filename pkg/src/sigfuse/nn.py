"""Dense-network building blocks: affine layers, activations, BCE loss,
explicit gradients, SGD updates and a finite-difference gradient checker.

All internal arithmetic is float64; float32 appears only at file/wire
boundaries. Randomness always flows through `make_rng`, a PCG64 generator
keyed by (seed, stream ids), so identical seeds give identical streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] inside the loss to
# avoid log(0).
BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when array dimensions do not match a layer's declaration."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for (seed, stream). Same arguments, same draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=stream)))


@dataclass
class DenseLayer:
    """Affine layer y = x W + b with weights (in_dim, out_dim), bias (out_dim,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weights must be 2-D and bias 1-D, got "
                             f"{self.weights.ndim}-D and {self.bias.ndim}-D")
        if self.weights.shape[1] != self.bias.shape[0]:
            raise ShapeError(f"bias length {self.bias.shape[0]} does not match "
                             f"weight columns {self.weights.shape[1]}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy())


@dataclass
class LayerGrad:
    """Gradient of a loss w.r.t. one DenseLayer; shapes mirror the layer."""

    d_weights: np.ndarray
    d_bias: np.ndarray

    @classmethod
    def zeros_like(cls, layer: DenseLayer) -> "LayerGrad":
        return cls(np.zeros_like(layer.weights), np.zeros_like(layer.bias))


def init_dense(in_dim: int, out_dim: int, rng: np.random.Generator) -> DenseLayer:
    """Glorot-uniform weights in [-a, a], a = sqrt(6/(in+out)); zero bias."""
    a = np.sqrt(6.0 / (in_dim + out_dim))
    return DenseLayer(rng.uniform(-a, a, size=(in_dim, out_dim)), np.zeros(out_dim))


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    """x W + b. Accepts a single vector (in_dim,) or a batch (n, in_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, layer expects {layer.in_dim}")
    return x @ layer.weights + layer.bias


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, v)


def sigmoid(v: np.ndarray) -> np.ndarray:
    """Elementwise logistic; the split form avoids overflow for large |v|.

    Saturated values are nudged to the nearest representable number inside
    (0, 1) so outputs are strictly open-interval for every finite input.
    """
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return np.clip(out, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def bce_loss(pred: np.ndarray, label: np.ndarray) -> float:
    """Sum over attributes of binary cross-entropy, predictions clamped."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ShapeError(f"pred shape {pred.shape} != label shape {label.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.sum(label * np.log(p) + (1.0 - label) * np.log(1.0 - p)))


def bce_loss_batch(pred: np.ndarray, label: np.ndarray) -> float:
    """Mean over examples of the per-example summed BCE. pred, label: (n, L)."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ShapeError(f"pred shape {pred.shape} != label shape {label.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    per_example = -np.sum(label * np.log(p) + (1.0 - label) * np.log(1.0 - p), axis=-1)
    return float(np.mean(per_example))


def dense_backward(x: np.ndarray, layer: DenseLayer,
                   upstream: np.ndarray) -> tuple[LayerGrad, np.ndarray]:
    """Backprop through y = x W + b.

    Returns (grad, downstream) with d_weights = x^T upstream (outer product
    for single vectors), d_bias = upstream summed over the batch, and
    downstream = upstream W^T.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, layer expects {layer.in_dim}")
    if upstream.shape[-1] != layer.out_dim:
        raise ShapeError(f"upstream has {upstream.shape[-1]} features, "
                         f"layer outputs {layer.out_dim}")
    if x.ndim == 1:
        d_w = np.outer(x, upstream)
        d_b = upstream.copy()
    else:
        d_w = x.T @ upstream
        d_b = upstream.sum(axis=0)
    downstream = upstream @ layer.weights.T
    return LayerGrad(d_w, d_b), downstream


def sgd_step(layer: DenseLayer, grad: LayerGrad, lr: float) -> DenseLayer:
    """In-place plain SGD update: params <- params - lr * grad.

    lr = 0 is accepted and leaves the layer bit-identical.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    if grad.d_weights.shape != layer.weights.shape or grad.d_bias.shape != layer.bias.shape:
        raise ShapeError("gradient shapes do not match layer shapes")
    layer.weights -= lr * grad.d_weights
    layer.bias -= lr * grad.d_bias
    return layer


def finite_diff_check(loss_fn, params: list[np.ndarray],
                      analytic: list[np.ndarray], epsilon: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn` evaluates the scalar loss from the current contents of
    `params`; each array in `params` is perturbed in place. `analytic`
    holds the matching gradient arrays. Relative error per entry is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if len(params) != len(analytic):
        raise ShapeError("params and analytic gradient lists differ in length")
    worst = 0.0
    for p, g in zip(params, analytic):
        if p.shape != g.shape:
            raise ShapeError("analytic gradient shape does not match parameter shape")
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            lo_hi = loss_fn()
            flat_p[i] = orig - epsilon
            lo_lo = loss_fn()
            flat_p[i] = orig
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise ValueError("loss is not finite at the probed point")
            numeric = (lo_hi - lo_lo) / (2.0 * epsilon)
            a = flat_g[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
