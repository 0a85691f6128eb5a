"""Desk-scale studies: fidelity, learning-rate sweep, optimizer dependence,
pruning, efficiency and perturbation diagnostics.

Every runner takes an :class:`~adamshap.config.ExperimentConfig`, writes its
CSV files under ``cfg.output_dir`` and returns a result object. CSV columns
are the documented schema followed by ``config_hash``, ``config_seed`` and
``version``. Floats are written with ``repr`` so that equal configs give
byte-identical files; the one exception is measured wall-clock throughput.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._version import __version__
from .attribution import (
    AllocationAccountant,
    AttributionLedger,
    GhostCoefficients,
    ValGradient,
    adam_exact_scores,
    adam_ghost_scores,
)
from .config import ConfigError, ExperimentConfig
from .data import Dataset, gen_data, read_csv
from .estimator import InRunShapley, prune_indices, score_step
from .model import ModelSpec, backward_with_trace, trace_batch
from .numerics import CorrelationReport, Rng
from .oracle import OneStepUtility, RetrainingUtility, TrainerConfig, tmc_shapley
from .training import batch_schedule, make_optimizer, train_loop

log = logging.getLogger(__name__)

META_COLUMNS = ("config_hash", "config_seed", "version")
SCHEMAS = {
    "fidelity.csv": ("step", "sample_id", "method", "predicted", "actual"),
    "sweep.csv": ("eta", "method", "pearson", "spearman"),
    "optimizer_dependence.csv": ("triple", "sample_id", "sgd", "sgd_alt_seed", "adam",
                                 "adam_alt_seed"),
    "optimizer_dependence_summary.csv": ("triple", "comparison", "pearson", "spearman"),
    "pruning.csv": ("ratio", "strategy", "seed", "val_accuracy"),
    "pruning_summary.csv": ("ratio", "strategy", "mean_accuracy", "sd_accuracy"),
    "pruning_loss.csv": ("ratio", "strategy", "seed", "step", "train_loss"),
    "efficiency.csv": ("mode", "batch_size", "sps", "peak_extra_bytes"),
    "diagnostics.csv": ("step", "p10", "p50", "p90"),
    "stress.csv": ("sample_id", "ghost", "exact"),
}

# keys of the per-purpose random streams derived from the config seed
_INIT, _ORDER, _PROBE, _PRUNE, _TMC, _EFF = 101, 102, 103, 104, 105, 106


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_report(cfg: ExperimentConfig, filename: str, rows) -> Path:
    """Write ``rows`` under the schema registered for ``filename``."""
    path = cfg.out / filename
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = [cfg.config_hash, cfg.seed, __version__]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*SCHEMAS[filename], *META_COLUMNS])
        for row in rows:
            w.writerow([_cell(v) for v in row] + meta)
    return path


def derive_seed(seed: int, *key: int) -> int:
    return int(Rng(seed, *key).uniform(1)[0] * 2**31)


def load_dataset(cfg: ExperimentConfig, seed=None) -> Dataset:
    if cfg.csv_path:
        ds = read_csv(cfg.csv_path)
        if ds.indices("val").size == 0:
            raise ConfigError("CSV dataset needs rows with split=val", "csv_path")
        return ds
    return gen_data(cfg.kind, cfg.n_samples, cfg.n_features, cfg.flip_fraction,
                    cfg.seed if seed is None else seed, cfg.n_val, cfg.n_test, cfg.class_sep,
                    cfg.feature_scale_ratio, cfg.n_informative)


def build_spec(cfg: ExperimentConfig, ds: Dataset) -> ModelSpec:
    return ModelSpec((ds.n_features, *cfg.hidden_sizes, max(2, ds.n_classes)), cfg.activation,
                     "softmax_cross_entropy", True)


def _optimizer(cfg: ExperimentConfig, name=None, lr=None):
    return make_optimizer(name or cfg.optimizer, cfg.eta if lr is None else lr, cfg.beta1,
                          cfg.beta2, cfg.eps, cfg.bias_correction, cfg.momentum)


def _require_adam(cfg, methods):
    if cfg.optimizer != "adam" and any(m.startswith("adam") for m in methods):
        raise ConfigError("Adam-aware methods need optimizer = adam", "optimizer")


# ---------------------------------------------------------------- fidelity

@dataclass
class FidelityResult:
    rows: list
    reports: dict
    path: Path = None

    def pairs(self, method):
        sel = [(r[3], r[4]) for r in self.rows if r[2] == method]
        pred, actual = zip(*sel)
        return np.array(pred), np.array(actual)


def fidelity_pairs(cfg: ExperimentConfig, ds: Dataset = None) -> FidelityResult:
    """Score sampled steps with every method and with the one-step oracle."""
    _require_adam(cfg, cfg.methods)
    if max(cfg.score_steps) > cfg.steps:
        raise ConfigError("score_steps must not exceed steps", "score_steps")
    ds = ds or load_dataset(cfg)
    X, y, train_idx = ds.part("train")
    Xv, yv, _ = ds.part("val")
    Xv, yv = Xv[: cfg.val_size], yv[: cfg.val_size]
    spec = build_spec(cfg, ds)
    theta = spec.init_params(Rng(cfg.seed, _INIT))
    wanted = set(cfg.score_steps)
    rows = []
    checked = []

    def hook(ctx):
        if ctx.step not in wanted:
            return
        val = ValGradient.compute(spec, ctx.params, Xv, yv)
        scores = score_step(ctx, spec, val, cfg.methods, cfg.include_history)
        Xb, yb = X[ctx.batch], y[ctx.batch]
        grads = ctx.trace.per_sample_gradients()
        oracle = OneStepUtility(spec, ctx.params, ctx.optimizer, Xb, yb, Xv, yv, grads=grads)
        actual = np.array([oracle([i]) for i in range(len(ctx.batch))])
        if not checked:
            # independent second oracle: ground truth must not depend on call history
            again = OneStepUtility(spec, ctx.params, ctx.optimizer, Xb, yb, Xv, yv)
            redo = np.array([again([i]) for i in range(len(ctx.batch))])
            gap = float(np.max(np.abs(redo - actual)))
            if gap > 1e-12:
                raise RuntimeError(f"oracle re-derivation differs by {gap:.3e}")
            checked.append(gap)
        for method in cfg.methods:
            for i, sid in enumerate(train_idx[ctx.batch]):
                rows.append((ctx.step, int(sid), method, float(scores[method][i]),
                             float(actual[i])))

    train_loop(spec, theta, _optimizer(cfg), X, y, batch_size=cfg.batch_size,
               rng=Rng(cfg.seed, _ORDER), max_steps=max(cfg.score_steps), on_step=hook)
    result = FidelityResult(rows, {})
    for method in cfg.methods:
        result.reports[method] = CorrelationReport.from_pairs(*result.pairs(method))
    return result


def run_fidelity(cfg: ExperimentConfig) -> FidelityResult:
    result = fidelity_pairs(cfg)
    result.path = write_report(cfg, "fidelity.csv", result.rows)
    return result


@dataclass
class SweepResult:
    rows: list
    path: Path = None

    def pearson(self, eta, method) -> float:
        return next(r[2] for r in self.rows if r[0] == eta and r[1] == method)


def run_lr_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Fidelity at every learning rate of ``eta_grid`` with one shared seed."""
    ds = load_dataset(cfg)
    rows = []
    for eta in cfg.eta_grid:
        res = fidelity_pairs(cfg.replace(eta=eta), ds)
        for method in cfg.methods:
            r = res.reports[method]
            rows.append((eta, method, r.pearson_r, r.spearman_rho))
    result = SweepResult(rows)
    result.path = write_report(cfg, "sweep.csv", rows)
    return result


# ---------------------------------------------------- optimizer dependence

@dataclass
class DependenceResult:
    values: list
    summary: list
    paths: tuple = ()

    def correlation(self, triple, comparison) -> CorrelationReport:
        row = next(r for r in self.summary if r[0] == triple and r[1] == comparison)
        return CorrelationReport(row[2], row[3], len(self.values[triple]["sgd"]))


def tmc_values(cfg: ExperimentConfig, ds: Dataset, optimizer: str, perm_seed: int,
               init_seed: int):
    X, y, _ = ds.part("train")
    Xv, yv, _ = ds.part("val")
    lr = cfg.tmc_eta_sgd if optimizer == "sgd" else cfg.tmc_eta_adam
    trainer = TrainerConfig(optimizer, lr, cfg.tmc_steps, cfg.momentum, cfg.beta1, cfg.beta2,
                            cfg.eps, init_seed)
    util = RetrainingUtility(build_spec(cfg, ds), X, y, Xv[: cfg.val_size], yv[: cfg.val_size],
                             trainer, mode=cfg.tmc_mode)
    return tmc_shapley(util, n_permutations=cfg.n_permutations, tolerance=cfg.tmc_tolerance,
                       seed=perm_seed, truncate=cfg.tmc_tolerance > 0)


def run_optimizer_dependence(cfg: ExperimentConfig) -> DependenceResult:
    """TMC values under SGD and Adam, plus same-optimizer reseeded baselines.

    Triple ``k`` fixes a dataset, a model initialization and two permutation
    seeds ``a`` and ``b``. Only the permutation seed differs between the
    same-optimizer arms.
    """
    if cfg.n_samples > 60:
        raise ConfigError("retraining-based Shapley is limited to 60 samples", "n_samples")
    values, rows, summary = [], [], []
    for k in range(cfg.n_seeds):
        ds = load_dataset(cfg, seed=derive_seed(cfg.seed, _TMC, k, 0))
        init = derive_seed(cfg.seed, _TMC, k, 1)
        seed_a, seed_b = derive_seed(cfg.seed, _TMC, k, 2), derive_seed(cfg.seed, _TMC, k, 3)
        arms = {
            "sgd": tmc_values(cfg, ds, "sgd", seed_a, init).values,
            "sgd_alt_seed": tmc_values(cfg, ds, "sgd", seed_b, init).values,
            "adam": tmc_values(cfg, ds, "adam", seed_a, init).values,
            "adam_alt_seed": tmc_values(cfg, ds, "adam", seed_b, init).values,
        }
        values.append(arms)
        _, _, idx = ds.part("train")
        for i, sid in enumerate(idx):
            rows.append((k, int(sid), *(arms[a][i] for a in SCHEMAS[
                "optimizer_dependence.csv"][2:])))
        for name, (a, b) in (("sgd_vs_adam", ("sgd", "adam")),
                             ("sgd_vs_sgd", ("sgd", "sgd_alt_seed")),
                             ("adam_vs_adam", ("adam", "adam_alt_seed"))):
            r = CorrelationReport.from_pairs(arms[a], arms[b])
            summary.append((k, name, r.pearson_r, r.spearman_rho))
    paths = (write_report(cfg, "optimizer_dependence.csv", rows),
             write_report(cfg, "optimizer_dependence_summary.csv", summary))
    return DependenceResult(values, summary, paths)


# ----------------------------------------------------------------- pruning

STRATEGIES = ("bottom", "random", "top")


@dataclass
class PruningResult:
    rows: list
    values: np.ndarray
    flipped: np.ndarray
    paths: tuple = ()

    def mean_accuracy(self, ratio, strategy) -> float:
        return float(np.mean([r[3] for r in self.rows if r[0] == ratio and r[1] == strategy]))

    def flipped_in_bottom(self, quantile=0.2) -> float:
        """Share of flipped samples whose value falls in the lowest ``quantile``."""
        k = int(round(quantile * self.values.size))
        bottom = np.argsort(self.values, kind="mergesort")[:k]
        return float(self.flipped[bottom].sum() / max(self.flipped.sum(), 1))


def _classifier(cfg: ExperimentConfig, methods, random_state):
    return InRunShapley(hidden_layer_sizes=cfg.hidden_sizes, activation=cfg.activation,
                        optimizer=cfg.optimizer, learning_rate=cfg.eta,
                        batch_size=cfg.batch_size, max_epochs=cfg.epochs, beta1=cfg.beta1,
                        beta2=cfg.beta2, eps=cfg.eps, momentum=cfg.momentum,
                        bias_correction=cfg.bias_correction, methods=methods,
                        include_history=cfg.include_history, random_state=random_state)


def run_pruning(cfg: ExperimentConfig) -> PruningResult:
    """Value the data in a preliminary run, prune, retrain and measure accuracy.

    Accuracy is measured on the test split so that the validation split that
    steered the values is not reused for evaluation (val split when no test
    rows exist).
    """
    _require_adam(cfg, (cfg.prune_method,))
    ds = load_dataset(cfg)
    X, y, train_idx = ds.part("train")
    Xv, yv, _ = ds.part("val")
    Xt, yt, _ = ds.part("test") if ds.indices("test").size else ds.part("val")
    prelim = _classifier(cfg, (cfg.prune_method,), derive_seed(cfg.seed, _PRUNE, 0))
    prelim.fit(X, y, Xv[: cfg.val_size], yv[: cfg.val_size])
    values = prelim.data_values(cfg.prune_method)
    rows, curves = [], []
    for ratio in cfg.pruning_ratios:
        for strategy in STRATEGIES:
            for s in range(cfg.n_seeds):
                seed = derive_seed(cfg.seed, _PRUNE, 1, s)
                keep = prune_indices(values, ratio, strategy, Rng(cfg.seed, _PRUNE, 2, s))
                clf = _classifier(cfg, (), seed).fit(X[keep], y[keep])
                rows.append((ratio, strategy, seed, float(np.mean(clf.predict(Xt) == yt))))
                curves.extend((ratio, strategy, seed, t + 1, loss)
                              for t, loss in enumerate(clf.loss_curve_))
    summary = []
    for ratio in cfg.pruning_ratios:
        for strategy in STRATEGIES:
            acc = [r[3] for r in rows if r[0] == ratio and r[1] == strategy]
            summary.append((ratio, strategy, float(np.mean(acc)), float(np.std(acc))))
    paths = (write_report(cfg, "pruning.csv", rows),
             write_report(cfg, "pruning_summary.csv", summary),
             write_report(cfg, "pruning_loss.csv", curves))
    return PruningResult(rows, values, ds.flipped[train_idx], paths)


# -------------------------------------------------------------- efficiency

MODES = ("standard", "ghost", "direct")


@dataclass
class EfficiencyResult:
    rows: list
    step_seconds: dict = field(default_factory=dict)
    path: Path = None

    def sps(self, mode, batch_size) -> float:
        return next(r[2] for r in self.rows if r[0] == mode and r[1] == batch_size)

    def peak(self, mode, batch_size) -> int:
        return next(r[3] for r in self.rows if r[0] == mode and r[1] == batch_size)

    def scaling(self, mode):
        """``(slope, intercept, r2)`` of a least-squares line of step time against B."""
        bs = np.array(sorted(b for m, b in self.step_seconds if m == mode), dtype=float)
        ts = np.array([self.step_seconds[mode, int(b)] for b in bs])
        slope, intercept = np.polyfit(bs, ts, 1)
        resid = ts - (slope * bs + intercept)
        r2 = 1.0 - resid @ resid / max(((ts - ts.mean()) ** 2).sum(), 1e-300)
        return float(slope), float(intercept), float(r2)


class _Stepper:
    """One training step plus the attribution work of a given mode."""

    def __init__(self, cfg, spec, mode, X, y, Xv, yv):
        self.cfg, self.spec, self.mode = cfg, spec, mode
        self.X, self.y, self.Xv, self.yv = X, y, Xv, yv
        self.theta = spec.init_params(Rng(cfg.seed, _EFF, 0))
        self.opt = _optimizer(cfg, "adam")
        self.acct = AllocationAccountant()
        self.ledger = AttributionLedger(X.shape[0], keep_records=False)
        self.step_no = 0

    def __call__(self, idx):
        spec, opt, acct = self.spec, self.opt, self.acct
        self.step_no += 1
        B = len(idx)
        if self.mode == "ghost":
            # validation rows ride along in the training pass
            both = trace_batch(spec, self.theta, np.concatenate([self.X[idx], self.Xv]),
                               np.concatenate([self.y[idx], self.yv]))
            trace = both.rows(slice(0, B))
            val = ValGradient(None, both.rows(slice(B, None)))
            grad = trace.mean_gradient()
        else:
            grad, trace = backward_with_trace(spec, self.theta, self.X[idx], self.y[idx])
        if self.mode == "direct":
            val = ValGradient.compute(spec, self.theta, self.Xv, self.yv)
        if self.mode == "ghost":
            coeffs = GhostCoefficients.from_optimizer(opt, spec.n_params)
            scores = adam_ghost_scores(trace, val, coeffs, opt.lr, B, self.cfg.include_history,
                                       acct)
            self.ledger.accumulate(self.step_no, "adam_ghost", idx, scores)
        elif self.mode == "direct":
            G = acct.alloc(np.empty((B, spec.n_params)), "per-sample gradients")
            for i in range(B):
                G[i], _ = backward_with_trace(spec, self.theta, self.X[idx[i:i + 1]],
                                              self.y[idx[i:i + 1]])
            scores = adam_exact_scores(G, val, opt, opt.lr, B, self.cfg.include_history,
                                       accountant=acct)
            acct.free(G)
            self.ledger.accumulate(self.step_no, "adam_exact", idx, scores)
        self.theta = opt.step(self.theta, grad)


def time_modes(cfg: ExperimentConfig, spec, modes, batch_size, X, y, Xv, yv):
    """Median seconds per step and peak extra bytes for each mode.

    Timed blocks of the modes are interleaved round-robin so slow drift in
    machine load hits every mode alike. Each mode replays the same batches.
    """
    steppers = {mode: _Stepper(cfg, spec, mode, X, y, Xv, yv) for mode in modes}
    order = Rng(cfg.seed, _EFF, 1, batch_size)
    n = X.shape[0]
    batches = [order.child(k).choice(n, batch_size)
               for k in range(cfg.warmup + cfg.repetitions * cfg.steps_per_repetition)]
    for stepper in steppers.values():
        for idx in batches[: cfg.warmup]:
            stepper(idx)
        stepper.acct.reset()
    per_rep = {mode: [] for mode in modes}
    for rep in range(cfg.repetitions):
        lo = cfg.warmup + rep * cfg.steps_per_repetition
        todo = batches[lo: lo + cfg.steps_per_repetition]
        for mode, stepper in steppers.items():
            start = time.perf_counter()
            for idx in todo:
                stepper(idx)
            per_rep[mode].append((time.perf_counter() - start) / cfg.steps_per_repetition)
    resolution = time.get_clock_info("perf_counter").resolution
    out = {}
    for mode in modes:
        median = float(np.median(per_rep[mode]))
        if median < 1000 * resolution:
            raise ValueError(f"step time {median:.3e}s is too close to the timer resolution; "
                             "enlarge the model, batch_size or steps_per_repetition")
        out[mode] = (median, steppers[mode].acct.peak)
    return out


def time_mode(cfg: ExperimentConfig, spec, mode, batch_size, X, y, Xv, yv):
    """Median seconds per step over ``repetitions`` timed blocks, and peak extra bytes."""
    return time_modes(cfg, spec, (mode,), batch_size, X, y, Xv, yv)[mode]


def run_efficiency(cfg: ExperimentConfig) -> EfficiencyResult:
    ds = load_dataset(cfg)
    X, y, _ = ds.part("train")
    Xv, yv, _ = ds.part("val")
    Xv, yv = Xv[: cfg.val_size], yv[: cfg.val_size]
    spec = build_spec(cfg, ds)
    if max(cfg.batch_sizes) > X.shape[0]:
        raise ConfigError("batch size exceeds the training set", "batch_sizes")
    result = EfficiencyResult([])
    for B in cfg.batch_sizes:
        timed = time_modes(cfg, spec, MODES, B, X, y, Xv, yv)
        for mode in MODES:
            seconds, peak = timed[mode]
            result.step_seconds[mode, B] = seconds
            result.rows.append((mode, B, B / seconds, int(peak)))
            log.info("%s B=%d: %.4f s/step, peak %d bytes", mode, B, seconds, peak)
    result.path = write_report(cfg, "efficiency.csv", result.rows)
    return result


# ------------------------------------------------------------- diagnostics

@dataclass
class DiagnosticsResult:
    records: list
    stress_ids: np.ndarray
    ghost: np.ndarray
    exact: np.ndarray
    stress: CorrelationReport
    paths: tuple = ()

    def p50(self, step) -> float:
        return next(r[2] for r in self.records if r[0] == step)


def perturbation_percentiles(opt) -> tuple:
    u = np.abs(opt.effective_perturbation())
    p10, p50, p90 = np.percentile(u, [10, 50, 90])
    return float(p10), float(p50), float(p90)


def run_diagnostics(cfg: ExperimentConfig) -> DiagnosticsResult:
    """Track |u| percentiles per step and stress-test ghost vs exact early on.

    The stress probe is a fixed random set of training samples. At each of the
    first ``stress_steps`` steps every probe is scored by both Adam paths from
    that step's state (as a member of a batch of size ``batch_size``) and the
    scores are summed over the window.
    """
    if cfg.optimizer != "adam":
        raise ConfigError("diagnostics track Adam state; set optimizer = adam", "optimizer")
    ds = load_dataset(cfg)
    X, y, train_idx = ds.part("train")
    Xv, yv, _ = ds.part("val")
    Xv, yv = Xv[: cfg.val_size], yv[: cfg.val_size]
    spec = build_spec(cfg, ds)
    n_probe = min(cfg.stress_samples, X.shape[0])
    probes = np.sort(Rng(cfg.seed, _PROBE).choice(X.shape[0], n_probe))
    ghost, exact = np.zeros(n_probe), np.zeros(n_probe)
    records = []

    def stress(ctx):
        if ctx.step > cfg.stress_steps:
            return
        opt = ctx.optimizer
        val = ValGradient.compute(spec, ctx.params, Xv, yv)
        _, trace = backward_with_trace(spec, ctx.params, X[probes], y[probes])
        coeffs = GhostCoefficients.from_optimizer(opt, spec.n_params)
        ghost[:] += adam_ghost_scores(trace, val, coeffs, opt.lr, cfg.batch_size,
                                      cfg.include_history)
        exact[:] += adam_exact_scores(trace.per_sample_gradients(), val, opt, opt.lr,
                                      cfg.batch_size, cfg.include_history)

    def track(step, theta, opt):
        records.append((step, *perturbation_percentiles(opt)))

    train_loop(spec, spec.init_params(Rng(cfg.seed, _INIT)), _optimizer(cfg), X, y,
               batch_size=cfg.batch_size, rng=Rng(cfg.seed, _ORDER), max_steps=cfg.steps,
               on_step=stress, after_step=track)
    ids = train_idx[probes]
    report = CorrelationReport.from_pairs(ghost, exact)
    paths = (write_report(cfg, "diagnostics.csv", records),
             write_report(cfg, "stress.csv", zip(ids.tolist(), ghost, exact)))
    return DiagnosticsResult(records, ids, ghost, exact, report, paths)


RUNNERS = {
    "fidelity": run_fidelity,
    "lr-sweep": run_lr_sweep,
    "optimizer-dependence": run_optimizer_dependence,
    "pruning": run_pruning,
    "efficiency": run_efficiency,
    "diagnostics": run_diagnostics,
}


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.name](cfg)
