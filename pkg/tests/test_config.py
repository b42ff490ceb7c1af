import numpy as np
import pytest

from diracqc.config import RunConfig, TimeGrid, parse_config, with_overrides
from diracqc.errors import ConfigError


def test_defaults_parse_from_empty_text():
    assert parse_config("") == RunConfig()


def test_echo_round_trip():
    text = """
model: {name: two-level-linear, params: {coupling: 0.3}}
constraints: {name: parabola-bead, params: {a: 0.7}}
constants: {beta: 2.0}
integrator: {dt: 0.005, scheme: rk4}
ensemble: {size: 10, pair: [0, 1]}
respond: {force: {kind: cosine, frequency: 2.0}}
seed: 18446744073709551615
"""
    cfg = parse_config(text)
    assert cfg.seed == 2**64 - 1 and cfg.ensemble.pair == [0, 1]
    assert parse_config(cfg.to_yaml()) == cfg
    assert parse_config(cfg.to_yaml()).to_yaml() == cfg.to_yaml()


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("seed: 1\nsampler:\n  chains: 4\n  chanis: 5\n")
    assert exc.value.line == 4 and exc.value.field == "sampler.chanis"


@pytest.mark.parametrize("text, field, line", [
    ("threads: two\n", "threads", 1),
    ("constants:\n  beta: -1.0\n", "constants.beta", 2),
    ("seed: -3\n", "seed", 1),
    ("integrator: {dt: 0.01}\npropagate:\n  times: {stop: 1.0, every: 0.015}\n", "propagate.times", 3),
    ("respond:\n  force: {kind: sawtooth}\n", "respond.force", 2),
    ("ensemble:\n  pair: [0]\n", "ensemble.pair", 2),
    ("sample: {fredholm: 1}\n", "sample.fredholm", 1),
])
def test_invalid_values(text, field, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == field and exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("seed: 1\nmodel: [unclosed\n")
    assert exc.value.line is not None


def test_exponent_without_dot_is_a_number():
    assert parse_config("integrator: {dt: 1e-3}\n").integrator.dt == 1e-3


def test_overrides_are_validated():
    cfg = with_overrides(RunConfig(), seed=5, threads=None)
    assert cfg.seed == 5 and cfg.threads == 1
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), threads=0)


def test_time_grid_is_exact():
    t = TimeGrid(1.0, 0.1).times()
    assert len(t) == 11 and t[3] == 0.3 and t[-1] == 1.0
    assert np.array_equal(TimeGrid(0.0, 0.1).times(), [0.0])
