import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otcurate.core import (
    ConfigError,
    Dataset,
    ExperimentConfig,
    check_prob_matrix,
    seeded_rng,
    softmax,
    substream,
)


def test_seeded_rng_repeatable():
    a = seeded_rng(7).random(100)
    b = seeded_rng(7).random(100)
    assert np.array_equal(a, b)


def test_seeded_rng_distinct_seeds():
    assert not np.array_equal(seeded_rng(7).random(100), seeded_rng(8).random(100))


def test_seed_zero_is_valid():
    x = seeded_rng(0).random(10)
    assert np.all((x >= 0) & (x < 1))


def test_substreams_independent_of_name_order():
    a = substream(3, "warmup").random(5)
    substream(3, "ssl").random(50)
    b = substream(3, "warmup").random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, substream(3, "ssl").random(5))


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_large_logit_no_overflow():
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-14)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        softmax([np.nan, 0.0])
    with pytest.raises(ValueError):
        softmax([np.inf, 0.0])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-100, 100),
)
def test_softmax_shift_invariant(z, c):
    p = softmax(z)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p >= 0)
    np.testing.assert_allclose(softmax(np.asarray(z) + c), p, atol=1e-12)


def test_check_prob_matrix_rejects_bad_rows():
    check_prob_matrix([[0.2, 0.8], [0.5, 0.5]])
    with pytest.raises(ValueError):
        check_prob_matrix([[0.2, 0.7]])
    with pytest.raises(ValueError):
        check_prob_matrix([[1.2, -0.2]])


def test_dataset_counts_and_validation():
    ds = Dataset(np.zeros((4, 2)), [0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert ds.class_counts.tolist() == [1, 1, 2]
    assert ds.class_counts.sum() == len(ds)
    assert ds.is_clean.tolist() == [True, True, False, True]
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), [0], [0], 2)


def test_config_defaults_match_published_hyperparameters():
    cfg = ExperimentConfig()
    assert cfg.tau1 == 0.7
    assert cfg.lambda_ema == 0.99
    assert cfg.lambda_sw == 0.2
    assert cfg.lambda_c == 0.1


@pytest.mark.parametrize(
    "field,value,fragment",
    [
        ("rho", 0.5, "rho must be ≥ 1"),
        ("gamma", 1.0, "gamma must be in [0, 1)"),
        ("lambda_ema", 1.5, "lambda_ema"),
        ("tau1", 0.0, "tau1 must be in (0, 1)"),
    ],
)
def test_config_rejects_out_of_range(field, value, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("(", r"\(").replace(")", r"\)").replace("[", r"\[")):
        ExperimentConfig(**{field: value})


def test_config_round_trip():
    cfg = ExperimentConfig(gamma=0.5, rho=100.0)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()


def test_config_unknown_field():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"rhoo": 3})
