import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakstrong.errors import StratificationError, UndefinedMetricError
from weakstrong.evalmetrics import (
    FOLD_CSV_COLUMNS,
    CVSettings,
    accuracy,
    cv_harness,
    folds_csv,
    format_table,
    holdout_split,
    kendall_tau,
    roc_auc,
    slide_score,
    stratified_folds,
)
from weakstrong.numerics import Rng
from weakstrong.schemes import EarlyStopping, SchemeConfig
from weakstrong.shift import ShiftConfig
from weakstrong.synthdata import HIGH, GenConfig, generate_strong_dataset, generate_weak_dataset, pattern_label
from weakstrong.verify import brute_auc, brute_tau_b

scores_and_labels = st.integers(2, 30).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 8).map(lambda v: v / 4), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )
).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


def test_slide_score_examples():
    assert slide_score([1, 1, 1, 0]) == 0.75
    assert slide_score([0, 0, 0]) == 0.0
    preds = np.random.default_rng(0).integers(0, 2, size=1000)
    assert slide_score(preds) == sum(p == HIGH for p in preds) / 1000
    with pytest.raises(ValueError):
        slide_score([])


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_accuracy_examples():
    assert accuracy([0.0, 1.0, 0.0, 1.0], [0, 1, 0, 1]) == 1.0
    assert accuracy([1.0, 0.0], [0, 1]) == 0.0
    r = np.random.default_rng(1)
    s, y = r.uniform(size=100), r.integers(0, 2, size=100)
    assert accuracy(s, y) == sum((si >= 0.5) == (yi == 1) for si, yi in zip(s, y)) / 100


def test_kendall_examples():
    groups = [0, 1, 2, 3, 4]
    assert kendall_tau([0.1, 0.2, 0.3, 0.4, 0.5], groups) == 1.0
    assert kendall_tau([0.5, 0.4, 0.3, 0.2, 0.1], groups) == -1.0
    r = np.random.default_rng(2)
    s = r.integers(0, 4, size=12) / 4
    g = np.r_[np.arange(5), r.integers(0, 5, size=7)]
    assert kendall_tau(s, g) == brute_tau_b(s.tolist(), g.tolist())
    with pytest.raises(UndefinedMetricError):
        kendall_tau([0.1, 0.2, 0.3], [2, 2, 2])


@settings(max_examples=100, deadline=None)
@given(scores_and_labels)
def test_auc_matches_pair_enumeration(data):
    scores, labels = data
    assert roc_auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=60, deadline=None)
@given(scores_and_labels, st.sampled_from([np.exp, np.arctan, lambda v: 3 * v - 7, lambda v: v**3]))
def test_auc_invariant_under_monotone_transform(data, fn):
    scores, labels = data
    assert roc_auc(fn(np.array(scores)), labels) == roc_auc(scores, labels)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 25).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 5), min_size=n, max_size=n),
    st.lists(st.integers(0, 4), min_size=n, max_size=n),
)))
def test_tau_antisymmetry_and_oracle(data):
    scores, groups = np.array(data[0], float), np.array(data[1])
    if np.unique(groups).size < 2 or np.unique(scores).size < 2:
        return
    tau = kendall_tau(scores, groups)
    assert tau == -kendall_tau(-scores, groups)
    assert tau == brute_tau_b(scores.tolist(), groups.tolist())


@pytest.fixture(scope="module")
def bags():
    return generate_weak_dataset(GenConfig(n_bags=60, seed=1, n_strong=0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["label", "group"]))
def test_folds_partition_the_bags(bags, seed, by):
    folds = stratified_folds(bags, 5, Rng(seed), by)
    flat = np.concatenate(folds)
    assert sorted(flat.tolist()) == list(range(len(bags)))
    for f in folds:
        assert len({bags[i].weak_label for i in f}) == 2


def test_fold_with_single_class_is_reported():
    bags = generate_weak_dataset(GenConfig(n_bags=12, pair_weights={(3, 3): 10.0, (5, 5): 1.0}, seed=0, n_strong=0))
    with pytest.raises(StratificationError, match="fold"):
        stratified_folds(bags, 5, Rng(0))


def test_holdout_split_is_disjoint(bags):
    train, held = holdout_split(bags, np.arange(len(bags)), 0.2, Rng(3))
    assert not set(train) & set(held)
    assert len(train) + len(held) == len(bags)
    assert abs(len(held) - 12) <= 1


def test_oracle_predictor_gives_perfect_auc():
    cfg = GenConfig(n_bags=60, benign_fraction=0.0, pair_weights={(3, 3): 1, (4, 4): 1, (5, 5): 1}, n_strong=0, seed=2)
    bags = generate_weak_dataset(cfg)
    report = cv_harness(
        bags, [], SchemeConfig(use_strong=False), ShiftConfig(), seed=0,
        predictor=lambda b: np.array([pattern_label(p) for p in b.true_patterns()]),
    )
    assert report.mean["auc"] == 1.0
    assert report.mean["accuracy"] == 1.0


def test_cv_harness_is_deterministic_and_formats():
    cfg = GenConfig(n_bags=50, n_strong=60, seed=4)
    bags, strong = generate_weak_dataset(cfg), generate_strong_dataset(cfg)
    stop = EarlyStopping(max_epochs=2)
    scheme = SchemeConfig(weak_mode="sw_ws", learning_rate=1e-3)
    a = cv_harness(bags, strong, scheme, ShiftConfig(), 7, stop=stop)
    b = cv_harness(bags, strong, scheme, ShiftConfig(), 7, stop=stop)
    assert a.to_json() == b.to_json()
    assert [f.fold for f in a.folds] == list(range(5))
    assert sum(f.n_test_bags for f in a.folds) == len(bags)
    csv_text = folds_csv([a])
    assert csv_text.splitlines()[0] == ",".join(FOLD_CSV_COLUMNS)
    assert len(csv_text.splitlines()) == 6
    table = format_table([a], "t")
    assert "W+S (SW-WS)" in table and "(± " in table
    assert json.loads(a.to_json())["mean"]["auc"] == a.mean["auc"]


def test_cv_harness_parallel_matches_serial():
    cfg = GenConfig(n_bags=50, n_strong=60, seed=5)
    bags, strong = generate_weak_dataset(cfg), generate_strong_dataset(cfg)
    stop = EarlyStopping(max_epochs=2)
    serial = cv_harness(bags, strong, SchemeConfig(), ShiftConfig(), 1, stop=stop)
    parallel = cv_harness(bags, strong, SchemeConfig(), ShiftConfig(), 1, stop=stop, cv=CVSettings(workers=2))
    assert serial.to_json() == parallel.to_json()
