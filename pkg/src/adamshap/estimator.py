"""scikit-learn compatible front end: an MLP classifier that values its data while it trains."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attribution import (
    METHODS,
    AllocationAccountant,
    AttributionLedger,
    GhostCoefficients,
    ValGradient,
    adam_exact_scores,
    adam_ghost_scores,
    sgd_inrun_scores,
)
from .model import ModelSpec, forward, predict_output
from .numerics import Rng
from .optim import Adam
from .training import make_optimizer, train_loop


def score_step(ctx, spec: ModelSpec, val: ValGradient, methods, include_history=True,
               accountant=None):
    """Per-sample scores of every requested method for one training step.

    Scores are first-order validation-loss changes (negative means the
    sample helps). ``ctx`` is a :class:`adamshap.training.StepContext`.
    """
    opt = ctx.optimizer
    B = ctx.trace.n_samples
    out = {}
    for method in methods:
        if method == "sgd_first_order":
            out[method] = sgd_inrun_scores(ctx.trace, val, opt.lr, B, accountant)
        elif not isinstance(opt, Adam):
            raise ValueError(f"{method} requires the adam optimizer")
        elif method == "adam_ghost":
            coeffs = GhostCoefficients.from_optimizer(opt, spec.n_params)
            out[method] = adam_ghost_scores(ctx.trace, val, coeffs, opt.lr, B,
                                            include_history, accountant)
        elif method == "adam_exact":
            grads = ctx.trace.per_sample_gradients()
            if accountant is not None:
                accountant.alloc(grads, "per-sample gradients")
            out[method] = adam_exact_scores(grads, val, opt, opt.lr, B, include_history,
                                            accountant=accountant)
            if accountant is not None:
                accountant.free(grads)
        else:
            raise ValueError(f"unknown method {method!r}")
    return out


class InRunShapley(ClassifierMixin, BaseEstimator):
    """MLP classifier that accumulates In-Run Data Shapley values during ``fit``.

    Every training step scores the samples of its batch against the
    gradient of the mean validation loss at the pre-step parameters, and the
    per-step scores are summed per sample in :attr:`ledger_`.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    activation : {"relu", "tanh", "identity"}
    optimizer : {"adam", "sgd"}
    learning_rate : float
    batch_size : int
    max_epochs : int
    max_steps : int or None
        Hard cap on optimizer steps (overrides ``max_epochs`` when reached first).
    methods : tuple of str
        Any of ``"sgd_first_order"``, ``"adam_exact"``, ``"adam_ghost"``. The
        Adam methods require ``optimizer="adam"``. Empty means plain training.
    include_history : bool
        Keep the shared momentum term in the Adam scores.
    random_state : int
        Seeds initialization and minibatch order.

    Attributes
    ----------
    values_ : ndarray of shape (n_samples,)
        Data values of the first method, sign-flipped so that higher means
        the sample lowered validation loss more.
    ledger_ : AttributionLedger
        Raw per-step scores in loss-change units.
    """

    def __init__(self, hidden_layer_sizes=(64, 64), activation="tanh", optimizer="adam",
                 learning_rate=1e-3, batch_size=32, max_epochs=5, max_steps=None,
                 beta1=0.9, beta2=0.999, eps=1e-8, momentum=0.0, bias_correction=True,
                 methods=("adam_ghost",), include_history=True, random_state=0,
                 keep_records=False):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.momentum = momentum
        self.bias_correction = bias_correction
        self.methods = methods
        self.include_history = include_history
        self.random_state = random_state
        self.keep_records = keep_records

    def _validate_params(self):
        methods = tuple(self.methods or ())
        for m in methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
            if m.startswith("adam") and self.optimizer != "adam":
                raise ValueError(f"{m} requires optimizer='adam'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        return methods

    def fit(self, X, y, X_val=None, y_val=None, on_step=None):
        methods = self._validate_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if methods and X_val is None:
            raise ValueError("attribution needs a validation set (X_val, y_val)")
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            y_val = np.searchsorted(self.classes_, y_val)
        self.n_features_in_ = X.shape[1]
        n_classes = max(2, len(self.classes_))
        self.spec_ = ModelSpec((X.shape[1], *self.hidden_layer_sizes, n_classes),
                               self.activation, "softmax_cross_entropy", True)
        rng = Rng(int(self.random_state))
        theta = self.spec_.init_params(rng.child(0))
        opt = make_optimizer(self.optimizer, self.learning_rate, self.beta1, self.beta2,
                             self.eps, self.bias_correction, self.momentum)
        self.ledger_ = AttributionLedger(X.shape[0], keep_records=self.keep_records)
        self.accountant_ = AllocationAccountant()

        def hook(ctx):
            if methods:
                val = ValGradient.compute(self.spec_, ctx.params, X_val, y_val)
                scores = score_step(ctx, self.spec_, val, methods, self.include_history,
                                    self.accountant_)
                for method, s in scores.items():
                    self.ledger_.accumulate(ctx.step, method, ctx.batch, s)
            if on_step is not None:
                on_step(ctx)

        theta, self.loss_curve_ = train_loop(
            self.spec_, theta, opt, X, y_enc, batch_size=self.batch_size, rng=rng.child(1),
            epochs=self.max_epochs, max_steps=self.max_steps, on_step=hook)
        self.params_ = theta
        self.optimizer_ = opt
        self.n_steps_ = len(self.loss_curve_)
        self.values_ = -self.ledger_.totals(methods[0]) if methods else None
        return self

    def data_values(self, method=None) -> np.ndarray:
        """Higher-is-better values of ``method`` (default: the first one)."""
        check_is_fitted(self, "ledger_")
        method = method or self.methods[0]
        return -self.ledger_.totals(method)

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return predict_output(self.spec_, self.params_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def validation_loss(self, X, y) -> float:
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, dtype=np.float64)
        return forward(self.spec_, self.params_, X, np.searchsorted(self.classes_, y))[1]


def prune_indices(values, ratio: float, strategy: str, rng: Rng = None) -> np.ndarray:
    """Indices to *keep* after removing ``ratio`` of the samples.

    ``bottom`` drops the lowest values, ``top`` the highest, ``random`` a
    uniform subset drawn from ``rng``.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    k = int(round(ratio * n))
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    if strategy == "random":
        if rng is None:
            raise ValueError("random pruning needs an rng")
        drop = rng.choice(n, k) if k else np.zeros(0, dtype=np.int64)
    elif strategy in ("bottom", "top"):
        order = np.argsort(values, kind="mergesort")
        drop = order[:k] if strategy == "bottom" else order[n - k:]
    else:
        raise ValueError(f"unknown pruning strategy {strategy!r}")
    keep = np.ones(n, dtype=bool)
    keep[drop] = False
    return np.flatnonzero(keep)
