"""On-demand equivalence suite behind ``adamshap oracle-check``.

Each check compares a fast path with a brute-force reference on random
small instances and reports the worst observed error next to its bound.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import (
    GhostCoefficients,
    ValGradient,
    adam_exact_scores,
    adam_ghost_scores,
    ghost_pairwise_dot,
    ghost_weighted_dot,
    sgd_inrun_scores,
)
from .model import ModelSpec, backward_with_trace
from .numerics import Rng
from .optim import SGD, Adam
from .oracle import MAX_EXHAUSTIVE, OneStepUtility, exhaustive_shapley


@dataclass(frozen=True)
class CheckResult:
    name: str
    observed: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.observed <= self.tolerance)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name} observed={self.observed:.3e} tolerance={self.tolerance:.0e}"


def random_problem(seed: int, batch: int, n_val=3):
    """Random MLP, parameters, batch, validation points and a warmed-up Adam."""
    rng = Rng(seed)
    r = rng.uniform(4)
    depth = 1 + int(r[0] * 3)
    dims = tuple(2 + int(x * 6) for x in rng.child(9).uniform(depth + 1))
    act = ("relu", "tanh", "identity")[int(r[1] * 3)]
    spec = ModelSpec(dims, act, "softmax_cross_entropy", bool(r[2] < 0.7))
    theta = spec.init_params(rng.child(1))
    X = rng.child(2).gaussian((batch + n_val, dims[0]))
    y = np.floor(rng.child(3).uniform(batch + n_val) * dims[-1]).astype(np.int64)
    opt = Adam(1e-2)
    for k in range(3):
        opt.step(theta, 0.1 * rng.child(4, k).gaussian(spec.n_params))
    return spec, theta, X[:batch], y[:batch], X[batch:], y[batch:], opt


class _Surrogate:
    def __init__(self, G, g_val, lr):
        self.G, self.g_val, self.lr = G, g_val, lr
        self.n_players = G.shape[0]

    def __call__(self, subset):
        idx = list(subset)
        return -self.lr * float(self.g_val @ self.G[idx].sum(axis=0)) / self.n_players


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def oracle_check(batch: int = 6, seed: int = 0, n_instances: int = 20):
    """Run every check; returns a list of :class:`CheckResult`."""
    if not 1 <= batch <= MAX_EXHAUSTIVE:
        raise ValueError(f"batch must lie in [1, {MAX_EXHAUSTIVE}]")
    worst = dict.fromkeys(("ghost_pairwise_dot", "ghost_weighted_dot", "surrogate_shapley",
                           "efficiency_sgd", "efficiency_adam", "symmetry", "null_player",
                           "frozen_linearization"), 0.0)
    for k in range(n_instances):
        spec, theta, Xb, yb, Xv, yv, opt = random_problem(seed * 100003 + k, batch)
        _, trace = backward_with_trace(spec, theta, Xb, yb)
        val = ValGradient.compute(spec, theta, Xv, yv)
        G = trace.per_sample_gradients()
        worst["ghost_pairwise_dot"] = max(worst["ghost_pairwise_dot"],
                                          _rel(ghost_pairwise_dot(trace, val), G @ val.grad))
        u = Rng(seed, 7, k).gaussian(spec.n_params)
        worst["ghost_weighted_dot"] = max(worst["ghost_weighted_dot"],
                                          _rel(ghost_weighted_dot(trace, u), G @ u))
        sur = exhaustive_shapley(_Surrogate(G, val.grad, 0.1)).values
        worst["surrogate_shapley"] = max(worst["surrogate_shapley"],
                                         _rel(sur, sgd_inrun_scores(trace, val, 0.1)))
        for name, o in (("efficiency_sgd", SGD(0.1)), ("efficiency_adam", opt)):
            util = OneStepUtility(spec, theta, o, Xb, yb, Xv, yv, grads=G)
            phi = exhaustive_shapley(util).values
            worst[name] = max(worst[name], abs(phi.sum() - (util(range(batch)) - util([]))))
        if batch >= 2:
            G2 = G.copy()
            G2[1] = G2[0]
            if batch >= 3:
                G2[-1] = 0.0
            phi = exhaustive_shapley(OneStepUtility(spec, theta, opt, Xb, yb, Xv, yv,
                                                    grads=G2)).values
            worst["symmetry"] = max(worst["symmetry"], abs(phi[0] - phi[1]))
        if batch >= 3:
            phi = exhaustive_shapley(OneStepUtility(spec, theta, SGD(0.1), Xb, yb, Xv, yv,
                                                    grads=G2)).values
            worst["null_player"] = max(worst["null_player"], abs(phi[-1]))
        coeffs = GhostCoefficients.from_optimizer(opt, spec.n_params)
        ghost = adam_ghost_scores(trace, val, coeffs, opt.lr, batch)
        frozen = adam_exact_scores(G, val, opt, opt.lr, batch, freeze_second_moment=True)
        worst["frozen_linearization"] = max(worst["frozen_linearization"], _rel(ghost, frozen))
    bounds = {"ghost_pairwise_dot": 1e-10, "ghost_weighted_dot": 1e-10,
              "surrogate_shapley": 1e-9, "efficiency_sgd": 1e-9, "efficiency_adam": 1e-9,
              "symmetry": 1e-9, "null_player": 1e-9, "frozen_linearization": 1e-9}
    return [CheckResult(name, worst[name], bounds[name]) for name in worst]
