"""Experiment configuration: a frozen dataclass plus an INI-style file format.

The file has five sections (``[dataset]``, ``[model]``, ``[optimizer]``,
``[attribution]``, ``[experiment]``) holding ``key = value`` lines. Lists are
comma separated. Only ``experiment.name`` and ``experiment.seed`` are
required; every other key falls back to a default that is logged.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

SECTIONS = ("dataset", "model", "optimizer", "attribution", "experiment")
EXPERIMENTS = ("fidelity", "lr-sweep", "optimizer-dependence", "pruning", "efficiency",
               "diagnostics")
REQUIRED = ("name", "seed")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``line`` locate the culprit when known."""

    def __init__(self, message, key=None, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}: {message}{where}" if key else message + where)
        self.reason, self.key, self.line = message, key, line


def _opt(section, default, check=None, kind=None):
    return field(default=default, metadata={"section": section, "check": check, "kind": kind})


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x < 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of every experiment. Equal configs give byte-identical reports."""

    # [dataset]
    kind: str = _opt("dataset", "gaussian_mixture",
                     lambda v: v in ("gaussian_mixture", "xor_rings"))
    n_samples: int = _opt("dataset", 2000, lambda v: v >= 10)
    n_features: int = _opt("dataset", 10, _positive)
    flip_fraction: float = _opt("dataset", 0.0, lambda v: 0.0 <= v <= 0.5)
    class_sep: float = _opt("dataset", 2.0, _nonneg)
    feature_scale_ratio: float = _opt("dataset", 1.0, _positive)
    n_informative: int = _opt("dataset", 0, _nonneg)
    n_val: int = _opt("dataset", 200, _positive)
    n_test: int = _opt("dataset", 500, _nonneg)
    csv_path: str = _opt("dataset", "")
    # [model]
    hidden_sizes: tuple = _opt("model", (64, 64), lambda v: all(h > 0 for h in v), int)
    activation: str = _opt("model", "tanh", lambda v: v in ("relu", "tanh", "identity"))
    # [optimizer]
    optimizer: str = _opt("optimizer", "adam", lambda v: v in ("adam", "sgd"))
    eta: float = _opt("optimizer", 1e-3, _positive)
    beta1: float = _opt("optimizer", 0.9, _unit)
    beta2: float = _opt("optimizer", 0.999, _unit)
    eps: float = _opt("optimizer", 1e-8, _positive)
    momentum: float = _opt("optimizer", 0.0, _unit)
    bias_correction: bool = _opt("optimizer", True)
    # [attribution]
    methods: tuple = _opt("attribution", ("sgd_first_order", "adam_exact", "adam_ghost"),
                          lambda v: len(v) > 0 and set(v) <= {"sgd_first_order", "adam_exact",
                                                               "adam_ghost"}, str)
    include_history: bool = _opt("attribution", True)
    prune_method: str = _opt("attribution", "adam_ghost",
                             lambda v: v in ("sgd_first_order", "adam_exact", "adam_ghost"))
    val_size: int = _opt("attribution", 200, _positive)
    # [experiment]
    name: str = _opt("experiment", "fidelity", lambda v: v in EXPERIMENTS)
    seed: int = _opt("experiment", 0, _nonneg)
    output_dir: str = _opt("experiment", "results")
    steps: int = _opt("experiment", 200, _positive)
    batch_size: int = _opt("experiment", 64, _positive)
    score_steps: tuple = _opt("experiment", (25, 50, 75, 100, 125, 150, 175, 200),
                              lambda v: len(v) > 0 and all(s > 0 for s in v), int)
    eta_grid: tuple = _opt("experiment", (1e-7, 1e-6, 1e-5, 1e-4, 1e-3),
                           lambda v: len(v) > 0 and all(e > 0 for e in v), float)
    pruning_ratios: tuple = _opt("experiment", (0.1, 0.2, 0.3),
                                 lambda v: len(v) > 0 and all(0 <= r < 1 for r in v), float)
    n_seeds: int = _opt("experiment", 3, _positive)
    epochs: int = _opt("experiment", 10, _positive)
    n_permutations: int = _opt("experiment", 200, _positive)
    tmc_tolerance: float = _opt("experiment", 1e-3, _nonneg)
    tmc_steps: int = _opt("experiment", 30, _positive)
    tmc_eta_sgd: float = _opt("experiment", 0.1, _positive)
    tmc_eta_adam: float = _opt("experiment", 0.05, _positive)
    tmc_mode: str = _opt("experiment", "final", lambda v: v in ("final", "trajectory"))
    batch_sizes: tuple = _opt("experiment", (8, 16, 32, 64),
                              lambda v: len(v) > 0 and all(b > 0 for b in v), int)
    repetitions: int = _opt("experiment", 5, lambda v: v >= 5)
    steps_per_repetition: int = _opt("experiment", 5, _positive)
    warmup: int = _opt("experiment", 2, _nonneg)
    stress_samples: int = _opt("experiment", 50, _positive)
    stress_steps: int = _opt("experiment", 10, _positive)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            check = f.metadata["check"]
            if check is not None and not check(getattr(self, f.name)):
                raise ConfigError(f"value {getattr(self, f.name)!r} out of range", f.name)
        if self.n_informative > self.n_features:
            raise ConfigError("must not exceed n_features", "n_informative")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def config_hash(self) -> str:
        """Digest of everything except ``output_dir``, which cannot change results."""
        text = serialize(self, skip=("output_dir",))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(name, raw: str):
    f = FIELDS[name]
    default = f.default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(f.metadata["kind"](s) for s in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(str(exc), name) from None


def _line_of(text: str, section: str, key: str):
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return lineno
    return None


def parse_config_text(text: str, source="<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", exc.option, exc.lineno) from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}") from None
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", section)
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            line = _line_of(text, section, key)
            if key not in FIELDS:
                raise ConfigError("unknown key", key, line)
            if FIELDS[key].metadata["section"] != section:
                raise ConfigError(f"belongs in [{FIELDS[key].metadata['section']}], "
                                  f"not [{section}]", key, line)
            try:
                value = _convert(key, raw)
                check = FIELDS[key].metadata["check"]
                if check is not None and not check(value):
                    raise ConfigError(f"value {raw.strip()!r} out of range", key)
            except ConfigError as exc:
                raise ConfigError(exc.reason, key, line) from None
            values[key] = value
    for key in REQUIRED:
        if key not in values:
            raise ConfigError("missing required key", key)
    for name, f in FIELDS.items():
        if name not in values:
            log.info("default %s.%s = %s", f.metadata["section"], name, _format(f.default))
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(exc.reason, exc.key,
                          _line_of(text, FIELDS[exc.key].metadata["section"], exc.key)) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def serialize(cfg: ExperimentConfig, skip=()) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for name, f in FIELDS.items():
            if f.metadata["section"] == section and name not in skip:
                lines.append(f"{name} = {_format(getattr(cfg, name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize(cfg))
    return path
