import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otcurate.classifier import LinearModel, ce_loss
from otcurate.core import ExperimentConfig, seeded_rng, unit_rows
from otcurate.datagen import make_benchmark
from otcurate.ssl import (
    MODEL,
    TRANSPORT,
    BatchInputs,
    StageError,
    Toggles,
    assign_pseudo_labels,
    batch_gradient,
    batch_objective,
    contrastive_loss,
    make_views,
    run_pipeline,
    ssl_loss,
    total_loss,
)


# views


def test_views_identity_when_noise_off():
    f = unit_rows(seeded_rng(0).standard_normal((6, 4)))
    v = make_views(f, seeded_rng(1), 0.0, 0.0, 0.0)
    np.testing.assert_allclose(v.weak, f, atol=1e-15)
    np.testing.assert_allclose(v.strong, f, atol=1e-15)


def test_views_repeatable():
    f = unit_rows(seeded_rng(0).standard_normal((6, 4)))
    a = make_views(f, seeded_rng(3), 0.02, 0.1, 0.2)
    b = make_views(f, seeded_rng(3), 0.02, 0.1, 0.2)
    np.testing.assert_array_equal(a.weak, b.weak)
    np.testing.assert_array_equal(a.strong, b.strong)


def test_strong_view_moves_further():
    f = unit_rows(seeded_rng(0).standard_normal((1000, 8)))
    v = make_views(f, seeded_rng(4), 0.01, 0.1, 0.0)
    dw = np.linalg.norm(v.weak - f, axis=1).mean()
    ds = np.linalg.norm(v.strong - f, axis=1).mean()
    assert ds > dw
    np.testing.assert_allclose(np.linalg.norm(v.strong, axis=1), 1.0)


def test_views_reject_bad_sigmas():
    with pytest.raises(ValueError):
        make_views(np.ones((2, 2)), seeded_rng(0), 0.2, 0.1, 0.0)
    with pytest.raises(ValueError):
        make_views(np.ones((2, 2)), seeded_rng(0), 0.0, 0.1, 1.0)


# pseudo-labels


def test_pseudo_label_branches():
    probs = np.array([[0.8, 0.1, 0.1, 0.0], [0.5, 0.2, 0.2, 0.1], [0.7, 0.3, 0.0, 0.0]])
    pl = assign_pseudo_labels(probs, [2, 3, 1], 0.7)
    assert pl.labels.tolist() == [0, 3, 0]
    assert pl.source.tolist() == [MODEL, TRANSPORT, MODEL]
    assert pl.kept_mask.all()


def test_pseudo_label_absent_transport_dropped():
    pl = assign_pseudo_labels(np.array([[0.5, 0.5]]), [-1], 0.7)
    assert not pl.kept_mask[0]


def test_pseudo_label_without_transport_drops_sub_threshold():
    probs = np.array([[0.9, 0.1], [0.6, 0.4]])
    pl = assign_pseudo_labels(probs, [1, 1], 0.7, use_transport=False)
    assert pl.kept_mask.tolist() == [True, False]


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_pseudo_label_dichotomy_and_monotone(seed, t1, t2):
    rng = seeded_rng(seed)
    probs = rng.dirichlet(np.ones(4), 20)
    ot = rng.integers(0, 4, 20)
    lo, hi = sorted((t1, t2))
    a = assign_pseudo_labels(probs, ot, lo)
    b = assign_pseudo_labels(probs, ot, hi)
    assert np.array_equal(a.source == MODEL, probs.max(1) >= lo)
    assert np.sum(b.source == TRANSPORT) >= np.sum(a.source == TRANSPORT)


# contrastive


def test_infonce_identical_rows_closed_form():
    M = 5
    z = np.tile(unit_rows([[1.0, 2.0, 3.0]]), (M, 1))
    assert contrastive_loss(z, z, 0.5) == pytest.approx(math.log(2 * M - 1), rel=1e-12)


def test_infonce_orthonormal_low_temperature():
    z = np.eye(4)
    assert contrastive_loss(z, z, 0.01) < 1e-10


def test_infonce_permutation_invariant():
    rng = seeded_rng(2)
    zw = unit_rows(rng.standard_normal((7, 5)))
    zs = unit_rows(rng.standard_normal((7, 5)))
    perm = rng.permutation(7)
    assert contrastive_loss(zw, zs) == pytest.approx(contrastive_loss(zw[perm], zs[perm]), rel=1e-12)


def test_infonce_single_sample_warns(caplog):
    assert contrastive_loss(np.ones((1, 2)), np.ones((1, 2))) == 0.0
    assert "at least two" in caplog.text


def test_infonce_matches_explicit_sum():
    rng = seeded_rng(5)
    M, t = 3, 0.5
    zw = unit_rows(rng.standard_normal((M, 4)))
    zs = unit_rows(rng.standard_normal((M, 4)))
    z = np.vstack([zw, zs])
    total = 0.0
    for i in range(2 * M):
        pos = (i + M) % (2 * M)
        denom = sum(math.exp(z[i] @ z[j] / t) for j in range(2 * M) if j != i)
        total += -math.log(math.exp(z[i] @ z[pos] / t) / denom)
    assert contrastive_loss(zw, zs, t) == pytest.approx(total / (2 * M), rel=1e-12)


# losses


def test_ssl_loss_two_sample_hand():
    m = LinearModel([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    x_l, y_l = np.array([[2.0, 0.0]]), np.array([0])
    x_p, y_p = np.array([[0.0, 1.0]]), np.array([0])
    expected = -math.log(math.exp(2) / (math.exp(2) + 1)) - math.log(1 / (1 + math.e))
    assert ssl_loss(m, x_l, y_l, x_p, y_p) == pytest.approx(expected, rel=1e-12)


def test_ssl_loss_empty_pseudo_and_perfect():
    m = LinearModel([[50.0, 0.0], [0.0, 50.0]], [0.0, 0.0])
    x, y = np.eye(2), np.array([0, 1])
    empty = np.zeros((0, 2))
    assert ssl_loss(m, x, y, empty, np.zeros(0, int)) == ce_loss(m, x, y)
    assert ssl_loss(m, x, y, x, y) < 1e-15


def test_total_loss_examples():
    assert total_loss(1.0, 0.5, 0.2, 0.2, 0.1).l_total == pytest.approx(1.12, abs=1e-15)
    assert total_loss(0.7, 3.0, 9.0, 0.0, 0.0).l_total == 0.7
    assert total_loss(0.0, 0.0, 0.0).l_total == 0.0


def test_total_loss_non_finite_aborts():
    with pytest.raises(FloatingPointError, match="l_con"):
        total_loss(1.0, 0.0, float("nan"))


@settings(max_examples=300, deadline=None)
@given(*(st.floats(0, 100) for _ in range(5)))
def test_total_loss_decomposition_exact(a, b, c, ls, lc):
    parts = total_loss(a, b, c, ls, lc)
    assert parts.l_total == a + ls * b + lc * c


def random_batch(seed):
    rng = seeded_rng(seed)
    K, d, M = int(rng.integers(2, 5)), int(rng.integers(2, 5)), 6
    model = LinearModel(rng.standard_normal((K, d)), rng.standard_normal(K))
    zw = unit_rows(rng.standard_normal((M, d)))
    zs = unit_rows(rng.standard_normal((M, d)))
    plan = rng.dirichlet(np.ones(K * M)).reshape(K, M)
    b = BatchInputs(rng.standard_normal((4, d)), rng.integers(0, K, 4), zw * 2.0, rng.integers(0, K, M),
                    plan, 1 - rng.standard_normal((K, d)) @ zs.T, zw, zs)
    return model, b


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradient_matches_finite_differences(seed):
    model, b = random_batch(seed)
    gw, gb = batch_gradient(model, b)
    analytic = np.concatenate([gw.ravel(), gb.ravel()])
    numeric = []
    h = 1e-5
    for arr in (model.weights, model.bias):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = batch_objective(model, b, 0.2, 0.1, 0.5).l_total
            flat[i] = old - h
            down = batch_objective(model, b, 0.2, 0.1, 0.5).l_total
            flat[i] = old
            numeric.append((up - down) / (2 * h))
    numeric = np.array(numeric)
    err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    assert err <= 1e-4


# pipeline


def small_config(**kw):
    base = dict(N=600, rho=10.0, gamma=0.3, warmup_epochs=5, ssl_rounds=2, seed=1)
    base.update(kw)
    return ExperimentConfig(**base)


def test_pipeline_zero_rounds_returns_warmup_model():
    cfg = small_config(ssl_rounds=0)
    train, test = make_benchmark(cfg)
    res = run_pipeline(cfg, train, test)
    np.testing.assert_array_equal(res.model.weights, res.warmup_model.weights)
    assert res.rounds == [] and res.final_test_acc == res.warmup_test_acc


def test_pipeline_deterministic():
    cfg = small_config()
    train, test = make_benchmark(cfg)
    a = run_pipeline(cfg, train, test)
    b = run_pipeline(cfg, train, test)
    assert [r.row() for r in a.rounds] == [r.row() for r in b.rounds]
    np.testing.assert_array_equal(a.model.weights, b.model.weights)


def test_pipeline_round_metrics_consistent():
    cfg = small_config()
    train, test = make_benchmark(cfg)
    res = run_pipeline(cfg, train, test)
    for r in res.rounds:
        assert r.n_labeled + r.n_unlabeled == len(train)
        assert r.l_total == pytest.approx(r.l_ssl + 0.2 * r.l_sw + 0.1 * r.l_con, rel=1e-12)
        assert 0 <= r.test_acc <= 1


def test_pipeline_shared_warm_start_matches_fresh_run():
    from otcurate.ssl import warmup_model

    cfg = small_config()
    train, test = make_benchmark(cfg)
    warm, _ = warmup_model(cfg, train)
    a = run_pipeline(cfg, train, test)
    b = run_pipeline(cfg, train, test, initial_model=warm)
    assert [r.row() for r in a.rounds] == [r.row() for r in b.rounds]


def test_pipeline_without_otp_drops_instead_of_transport():
    cfg = small_config()
    train, test = make_benchmark(cfg)
    res = run_pipeline(cfg, train, test, Toggles(otp=False))
    assert all(r.n_transport == 0 for r in res.rounds)


def test_pipeline_no_regression_on_clean_data():
    cfg = ExperimentConfig(gamma=0.0, seed=2, ssl_rounds=5)
    train, test = make_benchmark(cfg)
    res = run_pipeline(cfg, train, test)
    assert res.final_test_acc >= res.warmup_test_acc


def test_pipeline_stage_error_names_stage(monkeypatch):
    from otcurate import transport

    def broken(*args, **kwargs):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(transport, "sinkhorn", broken)
    cfg = small_config()
    train, test = make_benchmark(cfg)
    with pytest.raises(StageError, match="solver exploded") as info:
        run_pipeline(cfg, train, test)
    assert info.value.stage == "transport" and info.value.round_index == 0


def test_pipeline_dumps_plans(tmp_path):
    cfg = small_config(ssl_rounds=1)
    train, test = make_benchmark(cfg)
    run_pipeline(cfg, train, test, dump_dir=str(tmp_path))
    assert list(tmp_path.glob("plan_r000_b*.json"))
