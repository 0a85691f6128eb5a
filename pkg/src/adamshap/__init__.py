"""Adam-aware In-Run Data Shapley with ghost dot-products."""
from ._version import __version__
from .attribution import (
    AllocationAccountant,
    AttributionLedger,
    GhostCoefficients,
    ValGradient,
    adam_exact_scores,
    adam_ghost_scores,
    adam_taylor_scores,
    ghost_pairwise_dot,
    ghost_weighted_dot,
    sgd_inrun_scores,
)
from .estimator import InRunShapley, prune_indices
from .model import ModelSpec, backward_with_trace, forward, per_sample_gradients
from .optim import SGD, Adam, adam_step, restore, sgd_step, snapshot
