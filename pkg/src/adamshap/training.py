"""Minibatch training loop with a per-step hook."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BatchTrace, ModelSpec, backward_with_trace
from .numerics import Rng
from .optim import SGD, Adam


def make_optimizer(name: str, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                   bias_correction=True, momentum=0.0):
    if name == "adam":
        return Adam(lr, beta1, beta2, eps, bias_correction)
    if name == "sgd":
        return SGD(lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class StepContext:
    """State handed to ``on_step`` just before the optimizer moves.

    ``params`` and ``optimizer`` are the live pre-step objects; hooks must
    treat them as read-only (use :func:`adamshap.optim.snapshot` to branch).
    """

    step: int
    params: np.ndarray
    optimizer: object
    batch: np.ndarray
    grad: np.ndarray
    trace: BatchTrace


def batch_schedule(n: int, batch_size: int, rng: Rng, epoch: int):
    order = rng.child(epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_loop(spec: ModelSpec, theta, optimizer, X, y, *, batch_size, rng: Rng,
               epochs=None, max_steps=None, on_step=None, after_step=None):
    """Run minibatch training; returns ``(params, per_step_mean_losses)``.

    Steps are numbered from 1. Training stops after ``epochs`` passes or
    ``max_steps`` steps, whichever comes first; at least one must be given.
    ``after_step(step, params, optimizer)`` sees the post-step state.
    """
    if epochs is None and max_steps is None:
        raise ValueError("give epochs or max_steps")
    n = X.shape[0]
    losses = []
    step = epoch = 0
    while epochs is None or epoch < epochs:
        for idx in batch_schedule(n, batch_size, rng, epoch):
            if max_steps is not None and step >= max_steps:
                return theta, np.array(losses)
            step += 1
            grad, trace = backward_with_trace(spec, theta, X[idx], y[idx])
            if on_step is not None:
                on_step(StepContext(step, theta, optimizer, idx, grad, trace))
            losses.append(float(trace.losses.mean()))
            theta = optimizer.step(theta, grad)
            if after_step is not None:
                after_step(step, theta, optimizer)
        epoch += 1
    return theta, np.array(losses)
