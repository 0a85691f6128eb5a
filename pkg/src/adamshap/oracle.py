"""Ground-truth references: one-step utilities, exact and Monte Carlo Shapley.

Utilities map a subset (sequence of player indices) to a float. The
one-step utilities measure the validation-loss change caused by a single
optimizer step from a frozen state; the retraining utility trains a fresh
model on the subset.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from math import factorial

import numpy as np

from .attribution import ValGradient
from .model import (
    ModelSpec,
    _loss_and_error,
    _prepare,
    backward_with_trace,
    forward,
    per_sample_gradients,
)
from .numerics import NonFiniteError, Rng
from .optim import SGD, Adam, snapshot
from .training import make_optimizer

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 12


class OneStepUtility:
    """``U(S) = l_val(w') - l_val(w)`` for one step that only sees subset ``S``.

    The step uses ``sum_{z in S} g(z) / B`` with ``B`` the full batch size, so
    gradients of disjoint subsets add up. With ``first_order=True`` the loss
    change is replaced by its linearization ``g_val . (w' - w)``.

    The frozen parameters and optimizer are private copies; evaluating any
    subset never alters them.
    """

    def __init__(self, spec: ModelSpec, params, optimizer, X_batch, y_batch, X_val, y_val,
                 first_order=False, grads=None):
        self.spec = spec
        self._snap = snapshot(params, optimizer)
        self.grads = per_sample_gradients(spec, params, X_batch, y_batch) if grads is None else grads
        self.batch_size = self.grads.shape[0]
        self.X_val, self.y_val = X_val, y_val
        self.first_order = first_order
        self.base_loss = forward(spec, self._snap.params, X_val, y_val)[1]
        self.val_grad = None
        if first_order:
            self.val_grad = ValGradient.compute(spec, self._snap.params, X_val, y_val).grad

    @property
    def kind(self) -> str:
        return "one_step_adam" if isinstance(self._snap.optimizer, Adam) else "one_step_sgd"

    @property
    def n_players(self) -> int:
        return self.batch_size

    def subset_gradient(self, subset) -> np.ndarray:
        idx = np.asarray(list(subset), dtype=np.int64)
        if idx.size == 0:
            return np.zeros(self.grads.shape[1])
        return self.grads[idx].sum(axis=0) / self.batch_size

    def moved_params(self, subset) -> np.ndarray:
        w = self._snap.params
        return self._snap.optimizer.peek(w, self.subset_gradient(subset))

    def __call__(self, subset) -> float:
        subset = list(subset)
        if not subset and isinstance(self._snap.optimizer, SGD) and self._snap.optimizer.velocity is None:
            return 0.0
        w_new = self.moved_params(subset)
        if self.first_order:
            return float(self.val_grad @ (w_new - self._snap.params))
        return forward(self.spec, w_new, self.X_val, self.y_val)[1] - self.base_loss


def one_step_utility_change(spec, params, optimizer, X_batch, y_batch, subset, X_val, y_val):
    """Validation-loss change of one step taken on ``subset`` of the batch."""
    return OneStepUtility(spec, params, optimizer, X_batch, y_batch, X_val, y_val)(subset)


@dataclass(frozen=True)
class ShapleyEstimate:
    values: np.ndarray
    estimator: str
    stderr: np.ndarray = None
    n_permutations: int = None
    tolerance: float = None
    seed: int = None
    n_evaluations: int = 0


def _prefix_utilities(utility, perm):
    if hasattr(utility, "prefix_utilities"):
        return utility.prefix_utilities(perm)
    return np.array([utility(perm[: j + 1]) for j in range(len(perm))])


def exhaustive_shapley(utility, n_players=None) -> ShapleyEstimate:
    """Exact Shapley values by enumerating every coalition (n <= 12)."""
    n = utility.n_players if n_players is None else n_players
    if n > MAX_EXHAUSTIVE:
        raise ValueError(f"exhaustive Shapley limited to {MAX_EXHAUSTIVE} players, got {n}")
    n_masks = 1 << n
    members = [[i for i in range(n) if mask >> i & 1] for mask in range(n_masks)]
    U = np.array([utility(m) for m in members], dtype=np.float64)
    sizes = np.array([len(m) for m in members])
    weight = np.array([factorial(k) * factorial(n - k - 1) / factorial(n) for k in range(n)])
    values = np.zeros(n)
    masks = np.arange(n_masks)
    for i in range(n):
        without = masks[(masks >> i & 1) == 0]
        values[i] = np.sum(weight[sizes[without]] * (U[without | (1 << i)] - U[without]))
    return ShapleyEstimate(values, "exhaustive", n_evaluations=n_masks)


def tmc_shapley(utility, n_players=None, n_permutations=200, tolerance=1e-3, seed=0,
                truncate=True) -> ShapleyEstimate:
    """Truncated Monte Carlo Shapley over seeded random permutations.

    Along each permutation the marginal utility of every newly added player
    is recorded. Once the running coalition's utility is within
    ``tolerance`` of the grand coalition's, the remaining players get a
    zero marginal. Permutations whose utilities turn non-finite are skipped.
    """
    n = utility.n_players if n_players is None else n_players
    full = utility(range(n)) if truncate else None
    empty = utility([])
    total = np.zeros(n)
    total_sq = np.zeros(n)
    used = 0
    evals = 2 if truncate else 1
    for k in range(n_permutations):
        perm = Rng(seed, k).permutation(n)
        marg = np.zeros(n)
        prev = empty
        try:
            prefix = _prefix_utilities(utility, perm)
            for j in range(n):
                if truncate and abs(prev - full) < tolerance:
                    break
                cur = prefix[j]
                evals += 1
                if not np.isfinite(cur):
                    raise NonFiniteError("utility")
                marg[perm[j]] = cur - prev
                prev = cur
        except (NonFiniteError, FloatingPointError):
            log.warning("permutation %d skipped: non-finite utility", k)
            continue
        total += marg
        total_sq += marg * marg
        used += 1
    if used == 0:
        raise RuntimeError("every permutation was skipped")
    mean = total / used
    var = np.maximum(total_sq / used - mean * mean, 0.0)
    stderr = np.sqrt(var / max(used - 1, 1))
    return ShapleyEstimate(mean, "tmc", stderr, used, tolerance if truncate else None, seed, evals)


@dataclass(frozen=True)
class TrainerConfig:
    """Full-batch retraining recipe used by :class:`RetrainingUtility`."""

    optimizer: str = "sgd"
    lr: float = 0.1
    steps: int = 30
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_seed: int = 0


class RetrainingUtility:
    """Negative validation loss of a model trained from scratch on a subset.

    ``mode="final"`` uses the loss after the last step; ``mode="trajectory"``
    averages the validation loss over all post-step iterates.
    """

    def __init__(self, spec: ModelSpec, X, y, X_val, y_val, trainer: TrainerConfig,
                 mode="final"):
        if mode not in ("final", "trajectory"):
            raise ValueError(f"unknown utility mode {mode!r}")
        self.spec, self.X, self.y = spec, X, y
        self.X_val, self.y_val = X_val, y_val
        self.trainer = trainer
        self.mode = mode
        self.theta0 = spec.init_params(Rng(trainer.init_seed))

    @property
    def n_players(self) -> int:
        return self.X.shape[0]

    def _val_loss(self, theta):
        return forward(self.spec, theta, self.X_val, self.y_val)[1]

    def __call__(self, subset) -> float:
        idx = np.asarray(list(subset), dtype=np.int64)
        if idx.size == 0:
            return -self._val_loss(self.theta0)
        tr = self.trainer
        opt = make_optimizer(tr.optimizer, tr.lr, tr.beta1, tr.beta2, tr.eps, True, tr.momentum)
        theta = self.theta0
        Xs, ys = self.X[idx], self.y[idx]
        curve = []
        for _ in range(tr.steps):
            grad, _ = backward_with_trace(self.spec, theta, Xs, ys)
            theta = opt.step(theta, grad)
            if self.mode == "trajectory":
                curve.append(self._val_loss(theta))
        if self.mode == "trajectory":
            return -float(np.mean(curve))
        return -self._val_loss(theta)

    def prefix_utilities(self, order) -> np.ndarray:
        """Utilities of every prefix ``order[:1], order[:2], ...`` at once.

        Single-layer models train all prefixes side by side as a stack of
        parameter vectors; deeper models fall back to one retraining each.
        """
        order = np.asarray(order, dtype=np.int64)
        n = order.size
        if self.spec.n_layers != 1:
            return np.array([self(order[: j + 1]) for j in range(n)])
        spec, tr = self.spec, self.trainer
        (w_sl, b_sl), = spec.layer_slices
        d_out, d_in = spec.layer_shapes[0]
        X, y = _prepare(spec, self.X[order], self.y[order])
        Xv, yv = _prepare(spec, self.X_val, self.y_val)
        tile = (lambda a: np.tile(a, n)) if y.ndim == 1 else (lambda a: np.tile(a, (n, 1)))
        y_all, yv_all = tile(y), tile(yv)
        weight = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
        theta = np.tile(self.theta0, (n, 1))
        opt = make_optimizer(tr.optimizer, tr.lr, tr.beta1, tr.beta2, tr.eps, True, tr.momentum)

        def outputs(theta, A):
            W = theta[:, w_sl].reshape(n, d_out, d_in)
            out = np.einsum("nd,mcd->mnc", A, W)
            if b_sl is not None:
                out += theta[:, None, b_sl]
            return out

        def val_loss(theta):
            out = outputs(theta, Xv).reshape(-1, d_out)
            return _loss_and_error(spec, out, yv_all)[0].reshape(n, -1).mean(axis=1)

        curve = []
        for _ in range(tr.steps):
            _, err = _loss_and_error(spec, outputs(theta, X).reshape(-1, d_out), y_all)
            E = err.reshape(n, n, d_out) * weight[:, :, None]
            grad = np.empty_like(theta)
            grad[:, w_sl] = np.einsum("mnc,nd->mcd", E, X).reshape(n, -1)
            if b_sl is not None:
                grad[:, b_sl] = E.sum(axis=1)
            theta = opt.step(theta, grad)
            if self.mode == "trajectory":
                curve.append(val_loss(theta))
        if self.mode == "trajectory":
            return -np.mean(curve, axis=0)
        return -val_loss(theta)

