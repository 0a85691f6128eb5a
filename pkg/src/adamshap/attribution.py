"""Per-iteration In-Run Shapley scores under SGD and Adam.

Conventions shared by every scorer here:

* ``trace`` holds per-sample layer inputs and errors of the current batch,
  with errors normalized to each sample's own loss.
* A sample's perturbation of the batch update is ``g(z) / B`` where ``B`` is
  the batch size, so per-sample contributions to the first moment add up to
  the real batch update.
* Optimizer moments entering a step are shared by every sample in that step
  (fixed-state utility); only the current gradient is sample specific.

The ghost scorers never build a ``B x P`` per-sample gradient matrix. They
stream the weighting vector through each layer in row blocks, so the extra
memory is O(B * widest layer).
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .model import BatchTrace, ModelSpec, backward_with_trace, trace_batch
from .numerics import DimensionError
from .optim import Adam

METHODS = ("sgd_first_order", "adam_exact", "adam_ghost")


class AllocationAccountant:
    """Byte counter for buffers owned by attribution code.

    Only arrays handed to :meth:`alloc` are counted; the accountant never
    inspects process memory.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.largest = 0
        self._live = {}

    def alloc(self, arr, tag=""):
        n = int(arr.nbytes)
        self._live[id(arr)] = n
        self.current += n
        self.peak = max(self.peak, self.current)
        self.largest = max(self.largest, n)
        return arr

    def free(self, *arrs):
        for arr in arrs:
            self.current -= self._live.pop(id(arr), 0)

    def reset(self):
        self.current = self.peak = self.largest = 0
        self._live.clear()


class _NullAccountant(AllocationAccountant):
    def alloc(self, arr, tag=""):
        return arr

    def free(self, *arrs):
        pass


_NULL = _NullAccountant()


class ValGradient:
    """Mean validation gradient with the validation samples' own trace.

    The flat gradient is only built on first access; ghost scoring reads the
    trace alone.
    """

    def __init__(self, grad, trace: BatchTrace):
        self._grad = grad
        self.trace = trace

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = self.trace.mean_gradient()
        return self._grad

    @classmethod
    def compute(cls, spec: ModelSpec, theta, X_val, y_val) -> "ValGradient":
        return cls(None, trace_batch(spec, theta, X_val, y_val))


def _layout(trace: BatchTrace):
    """Flat-vector ``(w_slice, b_slice, d_out, d_in)`` per layer of a trace."""
    out, pos = [], 0
    for a, d in zip(trace.activations, trace.errors):
        d_out, d_in = d.shape[1], a.shape[1]
        w = slice(pos, pos + d_out * d_in)
        pos += d_out * d_in
        b = None
        if trace.bias:
            b = slice(pos, pos + d_out)
            pos += d_out
        out.append((w, b, d_out, d_in))
    return out, pos


def _check_same_arch(trace: BatchTrace, other: BatchTrace):
    if trace.bias != other.bias or trace.n_layers != other.n_layers:
        raise DimensionError("trace and validation trace come from different architectures")
    for a, d, av, dv in zip(trace.activations, trace.errors, other.activations, other.errors):
        if a.shape[1] != av.shape[1] or d.shape[1] != dv.shape[1]:
            raise DimensionError("trace and validation trace come from different architectures")


def _block_rows(batch_size, widest, d_in):
    # Ghost and preconditioner blocks (rows x d_in each) plus the projected
    # activations (B x rows) stay within 1.75 * B * widest elements.
    return max(1, (7 * batch_size * widest) // (4 * (2 * d_in + batch_size)))


def ghost_pairwise_dot(trace: BatchTrace, val: ValGradient, accountant=None) -> np.ndarray:
    """``<g_i, g_val>`` per sample from error and activation correlations.

    With several validation samples ``g_val`` is their mean gradient.
    """
    acct = accountant or _NULL
    _check_same_arch(trace, val.trace)
    B = trace.n_samples
    scores = acct.alloc(np.zeros(B), "scores")
    for a, d, av, dv in zip(trace.activations, trace.errors, val.trace.activations, val.trace.errors):
        err_corr = acct.alloc(d @ dv.T, "error correlation")
        act_corr = acct.alloc(a @ av.T, "activation correlation")
        if trace.bias:
            act_corr += 1.0
        scores += np.mean(err_corr * act_corr, axis=1)
        acct.free(err_corr, act_corr)
    return scores


def _streamed_dot(trace: BatchTrace, block_fn, acct):
    """Sum over layers and row blocks of ``delta_i[rows] . (U[rows] @ a_i)``.

    ``block_fn(l, r0, r1)`` returns the ``(r1 - r0) x d_in`` weight block
    of the weighting vector and its bias block (or None).
    """
    B = trace.n_samples
    widest = max(max(a.shape[1], d.shape[1]) for a, d in zip(trace.activations, trace.errors))
    scores = acct.alloc(np.zeros(B), "scores")
    for l, (a, d) in enumerate(zip(trace.activations, trace.errors)):
        d_out, d_in = d.shape[1], a.shape[1]
        step = _block_rows(B, widest, d_in)
        for r0 in range(0, d_out, step):
            r1 = min(d_out, r0 + step)
            U, ub = block_fn(l, r0, r1)
            proj = acct.alloc(a @ U.T, "projected activations")
            if ub is not None:
                proj += ub
            scores += np.einsum("br,br->b", d[:, r0:r1], proj)
            acct.free(proj, U)
    return scores


def ghost_weighted_dot(trace: BatchTrace, u, accountant=None) -> np.ndarray:
    """``<g_i, u>`` per sample for a flat parameter-shaped vector ``u``."""
    acct = accountant or _NULL
    layout, P = _layout(trace)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (P,):
        raise DimensionError(f"weighting vector has shape {u.shape}, expected ({P},)")

    def block(l, r0, r1):
        w, b, d_out, d_in = layout[l]
        U = u[w].reshape(d_out, d_in)[r0:r1]
        return U, (None if b is None else u[b][r0:r1])

    return _streamed_dot(trace, block, acct)


def sgd_inrun_scores(trace: BatchTrace, val: ValGradient, lr: float, batch_size=None,
                     accountant=None) -> np.ndarray:
    """First-order SGD score ``-lr / B * <g_i, g_val>``."""
    B = trace.n_samples if batch_size is None else batch_size
    return -lr / B * ghost_pairwise_dot(trace, val, accountant)


@dataclass(frozen=True)
class GhostCoefficients:
    """Scalars and shared state behind the linearized Adam score of step ``t``.

    ``m_prev`` and ``v_prev`` are the raw moments entering the step; the
    history preconditioner is ``sqrt(v_prev * v_scale) + eps`` where
    ``v_scale`` applies the bias correction of step ``t - 1``.
    """

    t: int
    c_m1: float
    c_m2: float
    c_v: float
    m_prev: np.ndarray
    v_prev: np.ndarray
    v_scale: float
    eps: float

    @classmethod
    def from_optimizer(cls, opt: Adam, n_params=None) -> "GhostCoefficients":
        t = opt.t + 1
        n = n_params if opt.m is None else opt.m.size
        m_prev = np.zeros(n) if opt.m is None else opt.m
        v_prev = np.zeros(n) if opt.v is None else opt.v
        b1, b2 = opt.beta1, opt.beta2
        if opt.bias_correction:
            c1 = 1.0 - b1**t
            c_m1, c_m2, c_v = b1 / c1, (1.0 - b1) / c1, (1.0 - b2) / (1.0 - b2**t)
            v_scale = 1.0 if t == 1 else 1.0 / (1.0 - b2 ** (t - 1))
        else:
            c_m1, c_m2, c_v, v_scale = b1, 1.0 - b1, 1.0 - b2, 1.0
        return cls(t, c_m1, c_m2, c_v, m_prev, v_prev, v_scale, opt.eps)

    def preconditioner(self, sl=slice(None)) -> np.ndarray:
        out = self.v_prev[sl] * self.v_scale
        np.sqrt(out, out=out)
        out += self.eps
        return out

    @property
    def A(self) -> np.ndarray:
        return self.preconditioner()

    def first_moment(self, g) -> np.ndarray:
        return self.c_m1 * self.m_prev + self.c_m2 * g


def adam_ghost_scores(trace: BatchTrace, val: ValGradient, coeffs: GhostCoefficients,
                      lr: float, batch_size=None, include_history=True,
                      accountant=None) -> np.ndarray:
    """Linearized Adam score: shared history term plus a linear gradient term.

    The Adam-Ghost weighting ``(c_m2 / A) * g_val`` is rebuilt block by block
    from the validation trace and the optimizer's second moment, so neither
    it nor any per-sample gradient is held at full size.
    """
    acct = accountant or _NULL
    _check_same_arch(trace, val.trace)
    B = trace.n_samples if batch_size is None else batch_size
    layout, P = _layout(trace)
    if coeffs.m_prev.shape != (P,):
        raise DimensionError("optimizer state does not match the traced architecture")
    V = val.trace.n_samples
    history = [0.0]

    def block(l, r0, r1):
        w, b, d_out, d_in = layout[l]
        av, dv = val.trace.activations[l], val.trace.errors[l]
        rows = slice(w.start + r0 * d_in, w.start + r1 * d_in)
        # Summed validation gradient over sqrt(v_prev) + eps / root; the
        # 1/V, 1/root and c_m2 factors are applied once to the final sums.
        U = acct.alloc(dv[:, r0:r1].T @ av, "ghost block")
        A = acct.alloc(np.sqrt(coeffs.v_prev[rows]).reshape(r1 - r0, d_in),
                       "preconditioner block")
        A += eps
        U /= A
        acct.free(A)
        if include_history:
            history[0] += np.vdot(U, coeffs.m_prev[rows])
        ub = None
        if b is not None:
            bs = slice(b.start + r0, b.start + r1)
            ub = dv[:, r0:r1].sum(axis=0) / (np.sqrt(coeffs.v_prev[bs]) + eps)
            if include_history:
                history[0] += np.dot(ub, coeffs.m_prev[bs])
        return U, ub

    root = np.sqrt(coeffs.v_scale)
    eps = coeffs.eps / root
    linear = _streamed_dot(trace, block, acct)
    scale = lr / (V * root)
    return -scale * coeffs.c_m1 * history[0] - scale * coeffs.c_m2 / B * linear


def adam_exact_scores(grads, val: ValGradient, opt: Adam, lr: float, batch_size=None,
                      include_history=True, freeze_second_moment=False,
                      accountant=None) -> np.ndarray:
    """Adam-aware closed-form score from materialized per-sample gradients.

    Each sample's hypothetical step moves the shared moments by its own
    ``g(z) / B`` and the score is ``-lr * <g_val, m_hat / (sqrt(v_hat) + eps)>``.
    ``freeze_second_moment`` swaps the per-sample denominator for the history
    preconditioner. Without the history term a sample is scored relative to
    the empty update, i.e. the same expression at ``g(z) = 0`` is subtracted.
    """
    acct = accountant or _NULL
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    Bs, P = grads.shape
    B = Bs if batch_size is None else batch_size
    coeffs = GhostCoefficients.from_optimizer(opt, P)
    g_hat = acct.alloc(grads / B, "per-sample perturbation")
    m_hat = acct.alloc(coeffs.first_moment(g_hat), "per-sample first moment")
    acct.free(g_hat)
    if freeze_second_moment:
        denom = coeffs.A
    else:
        t = coeffs.t
        v = acct.alloc(opt.beta2 * coeffs.v_prev + (1.0 - opt.beta2) * (grads / B) ** 2,
                       "per-sample second moment")
        if opt.bias_correction:
            v /= 1.0 - opt.beta2**t
        denom = np.sqrt(v, out=v)
        denom += opt.eps
    scores = -lr * ((m_hat / denom) @ val.grad)
    acct.free(m_hat)
    if not freeze_second_moment:
        acct.free(denom)
    if not include_history:
        scores = scores - _exact_empty_score(coeffs, opt, val, lr, freeze_second_moment)
    return scores


def _exact_empty_score(coeffs, opt, val, lr, freeze_second_moment):
    m_hat = coeffs.c_m1 * coeffs.m_prev
    if freeze_second_moment:
        denom = coeffs.A
    else:
        v = opt.beta2 * coeffs.v_prev
        if opt.bias_correction:
            v = v / (1.0 - opt.beta2**coeffs.t)
        denom = np.sqrt(v) + opt.eps
    return -lr * float((m_hat / denom) @ val.grad)


def adam_taylor_scores(grads, val: ValGradient, coeffs: GhostCoefficients, lr: float,
                       batch_size=None, keep_quadratic=False) -> np.ndarray:
    """Materialized first-order expansion of the Adam score (ablation path).

    With ``keep_quadratic`` the denominator keeps its ``-c_v g^2 / (2 A^3)``
    correction and all of its products with the first moment; otherwise the
    result matches :func:`adam_ghost_scores` term for term.
    """
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    B = grads.shape[0] if batch_size is None else batch_size
    g_hat = grads / B
    A = coeffs.A
    inv = 1.0 / A
    if keep_quadratic:
        inv = inv - coeffs.c_v * g_hat**2 / (2.0 * A**3)
    return -lr * ((inv * coeffs.first_moment(g_hat)) @ val.grad)


class AttributionLedger:
    """Running per-sample totals, one array per scoring method."""

    def __init__(self, n_samples: int, keep_records=True):
        self.n_samples = int(n_samples)
        self.keep_records = keep_records
        self._totals = defaultdict(lambda: np.zeros(self.n_samples))
        self._records = []
        self._steps = set()

    @property
    def methods(self):
        return sorted(self._totals)

    @property
    def n_steps(self) -> int:
        return len(self._steps)

    def accumulate(self, step: int, method: str, sample_ids, scores):
        ids = np.asarray(sample_ids, dtype=np.int64).ravel()
        scores = np.asarray(scores, dtype=np.float64).ravel()
        if ids.shape != scores.shape:
            raise DimensionError("one score per sample id required")
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_samples):
            raise KeyError(f"unknown sample id in {ids.tolist()}")
        np.add.at(self._totals[method], ids, scores)
        self._steps.add(int(step))
        if self.keep_records:
            self._records.append((int(step), method, ids.copy(), scores.copy()))
        return self

    def totals(self, method: str) -> np.ndarray:
        return self._totals[method].copy()

    def records(self):
        """Yield ``(step, sample_id, method, score)`` tuples in insertion order."""
        for step, method, ids, scores in self._records:
            for i, s in zip(ids.tolist(), scores.tolist()):
                yield step, i, method, s

    def replay(self, method: str) -> np.ndarray:
        out = np.zeros(self.n_samples)
        for step, m, ids, scores in self._records:
            if m == method:
                np.add.at(out, ids, scores)
        return out
