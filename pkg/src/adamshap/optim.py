"""SGD and Adam over flat parameter vectors.

Both optimizers consume the mean gradient of a batch. State is owned by
the optimizer object and mutated in place by ``step``; ``step`` returns a
fresh parameter array and never writes into the one it was given.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, NonFiniteError


def _check_grad(params, grad):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(params):
        raise DimensionError(f"gradient shape {grad.shape} != parameter shape {np.shape(params)}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    return grad


@dataclass
class SGD:
    lr: float
    momentum: float = 0.0
    velocity: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def step(self, params, grad) -> np.ndarray:
        grad = _check_grad(params, grad)
        self.t += 1
        if self.momentum == 0.0:
            return params - self.lr * grad
        if self.velocity is None:
            self.velocity = np.zeros_like(grad)
        self.velocity = self.momentum * self.velocity + grad
        return params - self.lr * self.velocity

    def peek(self, params, grad) -> np.ndarray:
        """Parameters after one step on ``grad``; state is left untouched."""
        if self.momentum == 0.0 or self.velocity is None:
            return params - self.lr * grad
        return params - self.lr * (self.momentum * self.velocity + grad)


@dataclass
class Adam:
    """Adam with optional bias correction.

    ``m`` and ``v`` hold the raw moments after ``t`` steps. With
    ``bias_correction=False`` the update is ``m / (sqrt(v) + eps)`` on the
    raw moments.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")

    def moments_after(self, grad):
        """Moments ``(m_t, v_t, t)`` one step ahead, without mutating state."""
        m = (1.0 - self.beta1) * grad
        v = (1.0 - self.beta2) * grad * grad
        if self.m is not None:
            m += self.beta1 * self.m
            v += self.beta2 * self.v
        return m, v, self.t + 1

    def corrected(self, m, v, t):
        if not self.bias_correction or t == 0:
            return m, v
        return m / (1.0 - self.beta1**t), v / (1.0 - self.beta2**t)

    def direction(self, m, v, t) -> np.ndarray:
        m_hat, v_hat = self.corrected(m, v, t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params, grad) -> np.ndarray:
        grad = _check_grad(params, grad)
        m, v, t = self.moments_after(grad)
        self.m, self.v, self.t = m, v, t
        return params - self.lr * self.direction(m, v, t)

    def peek(self, params, grad) -> np.ndarray:
        """Parameters after one step on ``grad``; state is left untouched."""
        m, v, t = self.moments_after(grad)
        return params - self.lr * self.direction(m, v, t)

    def effective_perturbation(self) -> np.ndarray:
        """Elementwise ``m_hat / (sqrt(v_hat) + eps)`` of the current state."""
        if self.m is None:
            raise ValueError("optimizer has not taken a step yet")
        return self.direction(self.m, self.v, self.t)


def sgd_step(params, state: SGD, grad) -> np.ndarray:
    return state.step(params, grad)


def adam_step(params, state: Adam, grad) -> np.ndarray:
    return state.step(params, grad)


@dataclass(frozen=True)
class StateSnapshot:
    params: np.ndarray
    optimizer: object = field(repr=False)


def snapshot(params, optimizer) -> StateSnapshot:
    return StateSnapshot(np.array(params, copy=True), copy.deepcopy(optimizer))


def restore(snap: StateSnapshot):
    """Fresh ``(params, optimizer)`` copies; the snapshot itself stays untouched."""
    return np.array(snap.params, copy=True), copy.deepcopy(snap.optimizer)
