import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from poisonforge.actionspace import (
    ItemGroups,
    build_action_space,
    build_groups,
    interaction_matrix,
    kmeans,
    nmf,
    nmf_item_features,
    sample_item,
    wcss,
)
from poisonforge.data import TargetSpec

from conftest import make_dataset


# -- NMF ---------------------------------------------------------------------------
def test_exact_rank_one():
    _, _, err = nmf(np.array([[1.0, 2.0], [2.0, 4.0]]), 1, iters=2000, seed=0)
    assert err[-1] <= 1e-6


def test_error_monotone_over_seeds():
    X = (np.random.default_rng(0).random((30, 20)) < 0.3).astype(float)
    for seed in range(100):
        _, _, err = nmf(X, 4, iters=60, seed=seed)
        assert np.all(np.diff(err) <= 1e-12)


def test_full_rank_beats_rank_one():
    X = np.random.default_rng(1).random((4, 3))
    assert nmf(X, 3, 500, 0)[2][-1] <= nmf(X, 1, 500, 0)[2][-1]


def test_factors_nonnegative_and_validation(small_ds):
    H = nmf_item_features(small_ds, rank=5, iters=20)
    assert H.shape == (small_ds.n_items, 5) and (H >= 0).all()
    with pytest.raises(ValueError):
        nmf(np.array([[-1.0]]), 1)
    with pytest.raises(ValueError):
        nmf(np.ones((2, 2)), 0)


def test_interaction_matrix_is_binary_training_only():
    ds = make_dataset([[0, 1, 1, 2, 3]])
    X = interaction_matrix(ds)
    assert X.tolist() == [[1.0, 1.0, 0.0, 0.0]]  # val=2, test=3 excluded


# -- k-means ---------------------------------------------------------------------------
def test_separated_blobs():
    labels = kmeans(np.array([0.0, 0.1, 10.0, 10.1]), 2, seed=0)
    assert labels[0] == labels[1] != labels[2] == labels[3]


def test_single_cluster():
    assert set(kmeans(np.random.default_rng(0).normal(size=(10, 2)), 1).tolist()) == {0}


def test_cluster_count_validation():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)


def _centers(X, labels, c):
    return np.array([X[labels == j].mean(axis=0) if (labels == j).any() else np.zeros(X.shape[1]) for j in range(c)])


def test_wcss_beats_random_assignments():
    rng = np.random.default_rng(2)
    X = np.vstack([rng.normal(m, 0.5, size=(10, 2)) for m in (0, 3, 6)])
    labels = kmeans(X, 3, seed=0)
    best = wcss(X, labels, _centers(X, labels, 3))
    for _ in range(1000):
        r = rng.integers(0, 3, len(X))
        assert best <= wcss(X, r, _centers(X, r, 3)) + 1e-12


def test_duplicate_points_do_not_leave_empty_clusters():
    X = np.array([[0.0], [0.0], [0.0], [5.0]])
    labels = kmeans(X, 3, seed=0)
    assert labels.shape == (4,)


# -- groups ----------------------------------------------------------------------------
def test_build_groups_example():
    ds = make_dataset([[1, 1, 3, 2]])  # train = [1, 1]; catalog 0..3
    g = build_groups(ds, TargetSpec((0,), (0,)), [5, 5, 7, 8])
    assert g.groups == ((0,), (1,), (2,), (3,))
    assert g.kinds == ("target", "history", "cluster", "cluster")


def test_target_precedence_over_history():
    ds = make_dataset([[0, 1, 2, 3]])  # train = [0, 1]
    g = build_groups(ds, TargetSpec((0,), (0,)), [0, 0, 0, 0])
    assert g.groups[0] == (0,) and g.groups[1] == (1,)


def test_all_items_are_targets():
    ds = make_dataset([[0, 1, 2]])
    g = build_groups(ds, TargetSpec((0, 1, 2), ()), [0, 1, 2])
    assert g.groups == ((0, 1, 2),) and g.n_groups == 1


def test_empty_target_group_is_fatal():
    ds = make_dataset([[0, 1, 2]])
    with pytest.raises(ValueError):
        build_groups(ds, TargetSpec((), ()), [0, 0, 0])


def test_groups_invariants_validation():
    with pytest.raises(ValueError):
        ItemGroups(((1,), (1, 2)), ("target", "cluster"))
    with pytest.raises(ValueError):
        ItemGroups(((1,), ()), ("target", "cluster"))
    with pytest.raises(ValueError):
        ItemGroups(((1,),), ("cluster",))


def test_action_space_partitions_catalog(small_ds, small_targets, tmp_path):
    g = build_action_space(small_ds, small_targets, rank=4, n_clusters=5, nmf_iters=30, seed=0)
    flat = sorted(i for grp in g.groups for i in grp)
    assert flat == list(range(small_ds.n_items))
    assert set(g.groups[0]) == set(small_targets.target_items)
    hist = {int(i) for u in small_targets.target_users for i in small_ds.train[u]} - set(small_targets.target_items)
    assert set(g.groups[1]) == hist
    assert g.n_groups <= 2 + 5
    g.save(tmp_path / "g.json")
    assert ItemGroups.load(tmp_path / "g.json") == g
    again = build_action_space(small_ds, small_targets, rank=4, n_clusters=5, nmf_iters=30, seed=0)
    assert again == g


# -- sampling ----------------------------------------------------------------------------
G = ItemGroups(((5,), (1, 2), (1001, 1002, 1003, 1004)), ("target", "history", "cluster"))


def test_sample_singleton_and_exclusion():
    rng = np.random.default_rng(0)
    assert sample_item(G, 0, set(), rng) == (5, 0, False)
    assert sample_item(G, 1, {1}, rng).item == 2


def test_sample_uniform_chi_square():
    rng = np.random.default_rng(1)
    draws = [sample_item(G, 2, set(), rng).item for _ in range(10_000)]
    counts = np.array([draws.count(i) for i in (1001, 1002, 1003, 1004)])
    assert np.all(np.abs(counts / 10_000 - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / 10_000))
    assert stats.chisquare(counts).pvalue > 1e-3


def test_exhausted_group_falls_back():
    d = sample_item(G, 0, {5}, np.random.default_rng(0))
    assert d.fallback and d.group != 0 and d.item != 5
    with pytest.raises(ValueError):
        sample_item(G, 0, {5, 1, 2, 1001, 1002, 1003, 1004}, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_item(G, 3, set(), np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2), st.sets(st.sampled_from([5, 1, 2, 1001, 1002, 1003]), max_size=5), st.integers(0, 10**6))
def test_sample_never_returns_forbidden(gid, forbidden, seed):
    d = sample_item(G, gid, forbidden, np.random.default_rng(seed))
    assert d.item not in forbidden and d.item in G.groups[d.group]
