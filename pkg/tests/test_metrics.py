import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otcurate.core import Dataset, ExperimentConfig, seeded_rng
from otcurate.datagen import make_benchmark
from otcurate.metrics import (
    ablation_run,
    class_groups,
    per_class_accuracy,
    prf,
    pseudo_label_accuracy,
    selection_f1,
    variants_for,
)
from otcurate.ssl import MODEL, TRANSPORT, run_pipeline


def test_groups_ceiling_split():
    groups = class_groups([200, 120, 70, 50, 30, 20, 10, 7, 4, 2])
    assert [g.tolist() for g in groups] == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]


def test_groups_ties_by_index():
    groups = class_groups([5, 5, 5])
    assert [g.tolist() for g in groups] == [[0], [1], [2]]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=20))
def test_groups_partition_classes(counts):
    groups = class_groups(counts)
    joined = np.sort(np.concatenate(groups))
    assert joined.tolist() == list(range(len(counts)))
    # every head class has at least the count of every tail class
    if len(groups[0]) and len(groups[2]):
        assert min(np.asarray(counts)[groups[0]]) >= max(np.asarray(counts)[groups[2]])


def test_prf_hand_case():
    # 2 TP, 1 FP, 1 FN, 2 TN
    pred = [1, 1, 1, 0, 0, 0]
    truth = [1, 1, 0, 1, 0, 0]
    p, r, f = prf(pred, truth)
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3))


def test_prf_all_false():
    assert prf([0, 0], [1, 0]) == (0.0, 0.0, 0.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_prf_matches_confusion_counts(pairs):
    pred = [a for a, _ in pairs]
    truth = [b for _, b in pairs]
    tp = sum(a and b for a, b in pairs)
    fp = sum(a and not b for a, b in pairs)
    fn = sum(b and not a for a, b in pairs)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    assert prf(pred, truth) == pytest.approx((p, r, f))


def toy_dataset():
    true = np.array([0, 0, 0, 0, 1, 1, 2, 2, 2])
    obs = np.array([0, 0, 1, 0, 1, 0, 2, 2, 0])
    return Dataset(np.zeros((9, 2)), true, obs, 3)


def test_selection_f1_perfect_mask():
    ds = toy_dataset()
    rep = selection_f1(ds.is_clean, ds)
    for g in rep.groups:
        assert g.f1 == 1.0
    assert rep.overall.f1 == 1.0


def test_selection_f1_all_false():
    ds = toy_dataset()
    rep = selection_f1(np.zeros(len(ds), bool), ds)
    assert all(g.recall == 0 and g.f1 == 0 for g in rep.groups)


def test_selection_f1_empty_group_marked():
    ds = Dataset(np.zeros((3, 1)), [0, 0, 0], [0, 0, 0], 3)
    rep = selection_f1([True, True, False], ds)
    assert rep.by_name("tail").f1 is None and rep.by_name("tail").n == 0
    assert rep.to_dict()["head"]["f1"] == pytest.approx(0.8)


def test_pseudo_accuracy_perfect_and_split():
    truth = np.array([0, 1, 2, 3, 4, 5])
    src = np.array([MODEL, MODEL, TRANSPORT, TRANSPORT, MODEL, TRANSPORT])
    labels = truth.copy()
    labels[3] = 0
    rep = pseudo_label_accuracy(labels, src, np.ones(6, bool), truth, np.ones(6))
    assert rep["model"] == 1.0
    assert rep["transport"] == pytest.approx(2 / 3)
    assert rep["overall"] == pytest.approx(5 / 6)
    assert pseudo_label_accuracy(truth, src, np.ones(6, bool), truth, np.ones(6))["overall"] == 1.0


def test_pseudo_accuracy_chance_level():
    rng = seeded_rng(0)
    n = 5000
    truth = rng.integers(0, 10, n)
    labels = rng.integers(0, 10, n)
    acc = pseudo_label_accuracy(labels, np.zeros(n), np.ones(n, bool), truth, np.ones(10))["overall"]
    sigma = np.sqrt(0.1 * 0.9 / n)
    assert abs(acc - 0.1) <= 3 * sigma


def test_pseudo_accuracy_empty_kept_errors():
    with pytest.raises(ValueError):
        pseudo_label_accuracy([0], [0], [False], [0], [1])


def test_per_class_accuracy_absent_class_nan():
    acc = per_class_accuracy([0, 1, 1], [0, 1, 0], 3)
    assert acc[0] == 0.5 and acc[1] == 1.0 and np.isnan(acc[2])


def test_variants_for_rejects_unknown():
    assert list(variants_for(["otp"])) == ["full", "wo_otp"]
    with pytest.raises(ValueError, match="unknown ablation"):
        variants_for(["xyz"])


def test_ablation_full_matches_pipeline():
    cfg = ExperimentConfig(N=600, rho=10.0, gamma=0.3, warmup_epochs=5, ssl_rounds=2, seed=4)
    train, test = make_benchmark(cfg)
    res = ablation_run(cfg, train, test, disabled=("otp",))
    direct = run_pipeline(cfg, train, test)
    assert [r.row() for r in res["full"].rounds] == [r.row() for r in direct.rounds]
    assert res["full"].warmup_trace == direct.warmup_trace
    assert set(res) == {"full", "wo_otp"}
