"""Fully-connected network with per-sample activation/error capture.

Parameters live in a single flat float64 vector. For each layer the
weight matrix ``W`` (``d_out x d_in``, row-major) is followed by the bias
``b`` when the spec carries biases. ``ModelSpec.unflatten`` returns views
into that vector.

Per-sample errors in a :class:`BatchTrace` are gradients of each sample's
*own* loss with respect to the layer's pre-activation output, so that
``outer(errors[l][i], activations[l][i])`` is sample ``i``'s weight gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, NonFiniteError, Rng, check_finite

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("softmax_cross_entropy", "mse")


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple
    activation: str = "relu"
    loss: str = "softmax_cross_entropy"
    bias: bool = True

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output width")
        if min(dims) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def layer_shapes(self):
        return [(self.layer_dims[l + 1], self.layer_dims[l]) for l in range(self.n_layers)]

    @property
    def layer_slices(self):
        """Per layer ``(weight_slice, bias_slice_or_None)`` into the flat vector."""
        out, pos = [], 0
        for d_out, d_in in self.layer_shapes:
            w = slice(pos, pos + d_out * d_in)
            pos += d_out * d_in
            b = None
            if self.bias:
                b = slice(pos, pos + d_out)
                pos += d_out
            out.append((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(o * (i + int(self.bias)) for o, i in self.layer_shapes)

    @property
    def widest(self) -> int:
        return max(self.layer_dims)

    def unflatten(self, theta):
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {theta.shape}")
        layers = []
        for (w, b), shape in zip(self.layer_slices, self.layer_shapes):
            layers.append((theta[w].reshape(shape), None if b is None else theta[b]))
        return layers

    def flatten(self, layers) -> np.ndarray:
        parts = []
        for (W, b), shape in zip(layers, self.layer_shapes):
            W = np.asarray(W, dtype=np.float64)
            if W.shape != shape:
                raise DimensionError(f"weight shape {W.shape} != {shape}")
            parts.append(W.ravel())
            if self.bias:
                parts.append(np.asarray(b, dtype=np.float64).ravel())
        return np.concatenate(parts)

    def init_params(self, rng: Rng) -> np.ndarray:
        gain = 2.0 if self.activation == "relu" else 1.0
        layers = []
        for l, (d_out, d_in) in enumerate(self.layer_shapes):
            W = rng.child(l).gaussian((d_out, d_in)) * np.sqrt(gain / d_in)
            layers.append((W, np.zeros(d_out)))
        return self.flatten(layers)


@dataclass(frozen=True)
class BatchTrace:
    """Layer inputs and per-sample errors captured by one backward pass."""

    activations: list
    errors: list
    losses: np.ndarray
    bias: bool = True
    preactivations: list = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return self.losses.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.errors)

    def rows(self, sl: slice) -> "BatchTrace":
        """Trace restricted to a contiguous range of samples (views, no copies)."""
        pre = None if self.preactivations is None else [z[sl] for z in self.preactivations]
        return BatchTrace([a[sl] for a in self.activations], [d[sl] for d in self.errors],
                          self.losses[sl], self.bias, pre)

    def mean_gradient(self) -> np.ndarray:
        """Flat gradient of the mean loss over the traced samples."""
        B = self.n_samples
        parts = []
        for a, d in zip(self.activations, self.errors):
            parts.append((d.T @ a / B).ravel())
            if self.bias:
                parts.append(d.mean(axis=0))
        return np.concatenate(parts)

    def per_sample_gradients(self) -> np.ndarray:
        """Materialize the ``B x P`` per-sample gradient matrix (oracle path)."""
        B = self.n_samples
        parts = []
        for a, d in zip(self.activations, self.errors):
            parts.append(np.einsum("bi,bj->bij", d, a).reshape(B, -1))
            if self.bias:
                parts.append(d)
        return np.concatenate(parts, axis=1)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, h):
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


def _prepare(spec: ModelSpec, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.layer_dims[0]:
        raise DimensionError(f"feature width {X.shape[1]} != input width {spec.layer_dims[0]}")
    check_finite(X, "features")
    if spec.loss == "softmax_cross_entropy":
        y = np.asarray(y).astype(np.int64).ravel()
        if y.shape[0] != X.shape[0]:
            raise DimensionError("label count differs from row count")
        if y.size and (y.min() < 0 or y.max() >= spec.layer_dims[-1]):
            raise ValueError("class label outside [0, n_classes)")
    else:
        y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], -1)
        if y.shape[1] != spec.layer_dims[-1]:
            raise DimensionError("target width differs from output width")
    return X, y


def _forward(spec, theta, X):
    inputs, pre = [], []
    h = X
    layers = spec.unflatten(theta)
    for l, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W.T
        if b is not None:
            z = z + b
        pre.append(z)
        h = z if l == len(layers) - 1 else _act(spec.activation, z)
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("non-finite network output")
    return inputs, pre, h


def _loss_and_error(spec, out, y):
    if spec.loss == "softmax_cross_entropy":
        shift = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shift).sum(axis=1))
        rows = np.arange(out.shape[0])
        losses = logz - shift[rows, y]
        err = np.exp(shift - logz[:, None])
        err[rows, y] -= 1.0
    else:
        resid = out - y
        losses = 0.5 * np.sum(resid * resid, axis=1)
        err = resid
    return losses, err


def forward(spec: ModelSpec, theta, X, y):
    """Return ``(per_sample_losses, mean_loss)``.

    The mse loss of a sample is ``0.5 * ||output - target||^2``.
    """
    X, y = _prepare(spec, X, y)
    _, _, out = _forward(spec, theta, X)
    losses, _ = _loss_and_error(spec, out, y)
    return losses, float(losses.mean())


def predict_output(spec: ModelSpec, theta, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return _forward(spec, theta, X)[2]


def trace_batch(spec: ModelSpec, theta, X, y) -> "BatchTrace":
    """Per-sample activations and errors of one batch, without any gradient."""
    X, y = _prepare(spec, X, y)
    inputs, pre, out = _forward(spec, theta, X)
    losses, err = _loss_and_error(spec, out, y)
    layers = spec.unflatten(theta)
    errors = [None] * spec.n_layers
    errors[-1] = err
    for l in range(spec.n_layers - 1, 0, -1):
        W = layers[l][0]
        z = pre[l - 1]
        errors[l - 1] = (errors[l] @ W) * _act_grad(spec.activation, z, inputs[l])
    return BatchTrace(inputs, errors, losses, spec.bias, pre)


def backward_with_trace(spec: ModelSpec, theta, X, y):
    """Mean-loss gradient plus the per-sample trace of one batch."""
    trace = trace_batch(spec, theta, X, y)
    return trace.mean_gradient(), trace


def per_sample_gradients(spec: ModelSpec, theta, X, y) -> np.ndarray:
    """``B x P`` matrix whose row ``i`` is the gradient of sample ``i``'s loss."""
    return backward_with_trace(spec, theta, X, y)[1].per_sample_gradients()
