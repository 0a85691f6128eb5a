import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adamshap.config import (
    EXPERIMENTS,
    FIELDS,
    ConfigError,
    ExperimentConfig,
    parse_config,
    parse_config_text,
    serialize,
    write_config,
)

METHODS = ("sgd_first_order", "adam_exact", "adam_ghost")
MINIMAL = "[experiment]\nname = fidelity\nseed = 7\n"


def test_minimal_config_fills_and_logs_defaults(caplog):
    with caplog.at_level(logging.INFO, logger="adamshap.config"):
        cfg = parse_config_text(MINIMAL)
    assert cfg == ExperimentConfig(name="fidelity", seed=7)
    logged = [r.getMessage() for r in caplog.records]
    assert len(logged) == len(FIELDS) - 2
    assert "default optimizer.eta = 0.001" in logged


def test_negative_eta_names_key_and_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text(MINIMAL + "[optimizer]\n\neta = -1\n")
    assert exc.value.key == "eta" and exc.value.line == 6
    assert "eta" in str(exc.value) and "line 6" in str(exc.value)


def test_zero_learning_rate_rejected():
    with pytest.raises(ConfigError, match="eta"):
        ExperimentConfig(eta=0.0)


@pytest.mark.parametrize("text, key, line", [
    (MINIMAL + "colour = red\n", "colour", 4),
    (MINIMAL + "[model]\nactivation = swish\n", "activation", 5),
    (MINIMAL + "[model]\neta = 0.1\n", "eta", 5),
    ("[experiment]\nname = fidelity\n", "seed", None),
    (MINIMAL + "[optimizer]\nbias_correction = maybe\n", "bias_correction", 5),
    (MINIMAL + "[experiment]\n", None, None),
    (MINIMAL + "steps = 1.5\n", "steps", 4),
    (MINIMAL + "score_steps = 10, x\n", "score_steps", 4),
    (MINIMAL + "seed = 8\n", "seed", 4),
    (MINIMAL + "[training]\nepochs = 2\n", "training", None),
    (MINIMAL + "[dataset]\nn_informative = 20\n", "n_informative", 5),
])
def test_rejections_locate_the_problem(text, key, line):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    if key is not None:
        assert exc.value.key == key
    assert exc.value.line == line


def test_timing_needs_five_repetitions():
    with pytest.raises(ConfigError) as exc:
        parse_config_text(MINIMAL + "repetitions = 3\n")
    assert (exc.value.key, exc.value.line) == ("repetitions", 4)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.ini")


def test_hash_ignores_output_dir():
    a = ExperimentConfig(seed=1, output_dir="x")
    assert a.config_hash == a.replace(output_dir="y").config_hash
    assert a.config_hash != a.replace(seed=2).config_hash


def test_file_round_trip(tmp_path):
    cfg = ExperimentConfig(name="pruning", seed=3, hidden_sizes=(), flip_fraction=0.15)
    assert parse_config(write_config(cfg, tmp_path / "c.ini")) == cfg


configs = st.builds(
    ExperimentConfig,
    name=st.sampled_from(EXPERIMENTS),
    seed=st.integers(0, 2**31),
    kind=st.sampled_from(("gaussian_mixture", "xor_rings")),
    n_samples=st.integers(10, 10_000),
    flip_fraction=st.floats(0.0, 0.5),
    class_sep=st.floats(0.0, 10.0),
    hidden_sizes=st.lists(st.integers(1, 512), max_size=3).map(tuple),
    activation=st.sampled_from(("relu", "tanh", "identity")),
    optimizer=st.sampled_from(("adam", "sgd")),
    eta=st.floats(1e-9, 1.0),
    beta1=st.floats(0.0, 0.999),
    bias_correction=st.booleans(),
    methods=st.lists(st.sampled_from(METHODS), min_size=1, max_size=3, unique=True).map(tuple),
    include_history=st.booleans(),
    eta_grid=st.lists(st.floats(1e-9, 1.0), min_size=1, max_size=5).map(tuple),
    pruning_ratios=st.lists(st.floats(0.0, 0.9), min_size=1, max_size=3).map(tuple),
    output_dir=st.text("abcxyz019_/-.", min_size=1, max_size=20),
    tmc_mode=st.sampled_from(("final", "trajectory")),
)


@settings(max_examples=50, deadline=None)
@given(configs)
def test_round_trip_random_configs(cfg):
    assert parse_config_text(serialize(cfg)) == cfg
