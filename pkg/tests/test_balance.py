import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from premirna import balance
from premirna.sequence_io import NEGATIVE, POSITIVE, LabeledDataset, RnaSequence


def _dataset(n_pos, n_neg):
    ex = [(RnaSequence(f"p{i}", "ACGU"), POSITIVE) for i in range(n_pos)]
    ex += [(RnaSequence(f"n{i}", "ACGU"), NEGATIVE) for i in range(n_neg)]
    return LabeledDataset(ex)


@given(st.integers(0, 10_000))
def test_kmeans_inertia_monotone(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(5, 80)), int(rng.integers(1, 5))))
    k = int(rng.integers(1, min(6, len(pts)) + 1))
    res = balance.kmeans(pts, k, seed=seed)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 0)
    assert len(np.unique(res.labels)) == k


def test_kmeans_separated_blobs_and_errors():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))])
    res = balance.kmeans(pts, 2, seed=1)
    assert len(set(res.labels[:20])) == 1 and len(set(res.labels[20:])) == 1
    assert res.labels[0] != res.labels[-1]
    with pytest.raises(ValueError):
        balance.kmeans(pts, 41)
    with pytest.raises(ValueError):
        balance.kmeans(np.array([[np.nan, 1.0]]), 1)


def test_kmeans_duplicate_points_repairs_empty_clusters():
    res = balance.kmeans(np.zeros((6, 2)), 3, seed=0)
    assert len(set(res.labels)) == 3


def test_undersample_picks_tightest_cluster():
    rng = np.random.default_rng(3)
    tight = rng.normal(0, 0.01, (30, 2))
    loose = rng.normal(20, 5.0, (30, 2))
    pts = np.vstack([tight, loose])
    ids = [f"t{i}" for i in range(30)] + [f"l{i}" for i in range(30)]
    picked = balance.undersample_negatives(pts, ids, 10, k=2, seed=0)
    assert len(picked) == 10 == len(set(picked))
    assert all(p.startswith("t") for p in picked)
    assert picked == balance.undersample_negatives(pts, ids, 10, k=2, seed=0)


def test_undersample_fills_when_cluster_small():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(50, 3))
    ids = [f"n{i}" for i in range(50)]
    picked = balance.undersample_negatives(pts, ids, 45, k=5, seed=2)
    assert len(set(picked)) == 45
    with pytest.raises(ValueError, match="exceeds"):
        balance.undersample_negatives(pts, ids, 51)


def test_stratified_folds_partition_and_roundtrip():
    ds = _dataset(21, 43)
    plan = balance.stratified_kfold(ds, 4, seed=5)
    tests = [set(plan.test_ids(f)) for f in range(4)]
    assert set().union(*tests) == set(ds.ids)
    assert sum(len(t) for t in tests) == len(ds)
    for f in range(4):
        assert not tests[f] & set(plan.train_ids(f))
        pos = sum(1 for i in tests[f] if i.startswith("p"))
        assert pos in (5, 6)
    assert balance.FoldPlan.from_json(plan.to_json()) == plan
    assert balance.stratified_kfold(ds, 4, seed=5) == plan
    with pytest.raises(ValueError):
        balance.stratified_kfold(_dataset(3, 10), 4)
