from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonforge.data import (
    DataError,
    Dataset,
    InteractionLog,
    build_dataset,
    filter_fixpoint,
    ingest_interactions,
    select_targets,
    write_log_csv,
)
from poisonforge.synth import SynthConfig, make_synthetic_log

from conftest import make_dataset


# -- ingestion -------------------------------------------------------------------
def test_csv_with_one_malformed_line(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("user,item,timestamp\na,x,1\nb,y,notatime\nc,z,3\n")
    log = ingest_interactions(p)
    assert len(log) == 2
    assert log.skipped == 1


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    log = ingest_interactions(p)
    assert len(log) == 0 and log.skipped == 0


def test_jsonl_ingest_and_duplicates(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text('{"user": "a", "item": "x", "ts": 1}\n{"user": "a", "item": "x", "ts": 1}\n'
                 '{"user": "a", "item": "x", "ts": 2}\n{"user": "b"}\n\n')
    log = ingest_interactions(p, "jsonl")
    assert len(log) == 2  # exact duplicate dropped, repeat at another time kept
    assert log.duplicates == 1 and log.skipped == 1


def test_csv_header_required(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(DataError):
        ingest_interactions(p)


def test_unknown_format(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("")
    with pytest.raises(DataError):
        ingest_interactions(p, "parquet")


def test_csv_roundtrip(tmp_path):
    recs = [("a", "x", 5), ("b", "y", 7)]
    write_log_csv(recs, tmp_path / "r.csv")
    assert ingest_interactions(tmp_path / "r.csv").records == recs


# -- filtering ---------------------------------------------------------------------
def _brute_force_fixpoint(records, mu, mi):
    recs = list(records)
    while True:
        uc = Counter(r[0] for r in recs)
        iu = {}
        for u, i, _ in recs:
            iu.setdefault(i, set()).add(u)
        new = [r for r in recs if uc[r[0]] >= mu and len(iu[r[1]]) >= mi]
        if new == recs:
            return recs
        recs = new


def test_only_active_user_survives():
    # A has 6 actions over 6 items; B has 2.  Four extra users make each item reach 5 users.
    recs = [("A", f"i{k}", k) for k in range(6)] + [("B", "i0", 1), ("B", "i1", 2)]
    for v in range(4):
        recs += [(f"V{v}", f"i{k}", 10 + k) for k in range(6)]
    ds = build_dataset(InteractionLog(recs))
    assert "A" in ds.user_ids and "B" not in ds.user_ids


def test_boundary_user_survives_with_train_length_3():
    recs = [(f"U{u}", f"i{k}", k) for u in range(5) for k in range(5)]
    ds = build_dataset(InteractionLog(recs))
    assert ds.n_users == 5
    assert all(len(ds.train[u]) == 3 for u in range(5))


def test_filter_matches_brute_force_oracle():
    log = make_synthetic_log(SynthConfig(n_users=500, n_items=300, n_clusters=6, min_len=2, mean_len=6, seed=4))
    assert filter_fixpoint(log.records, 5, 5) == _brute_force_fixpoint(log.records, 5, 5)


def test_filter_is_idempotent():
    log = make_synthetic_log(SynthConfig(n_users=200, n_items=150, seed=2))
    ds = build_dataset(log)
    again = build_dataset(ds.to_log())
    assert again.same_content(ds)


def test_empty_dataset_is_fatal():
    with pytest.raises(DataError, match="empty dataset"):
        build_dataset(InteractionLog([("a", "x", 1), ("a", "y", 2)]))
    with pytest.raises(DataError):
        build_dataset(InteractionLog())


def test_chronological_order_and_split():
    recs = [("u", f"i{k}", 10 - k) for k in range(5)] * 1
    recs += [(f"v{j}", f"i{k}", k) for j in range(4) for k in range(5)]
    ds = build_dataset(InteractionLog(recs))
    u = ds.user_ids.index("u")
    items = [ds.item_ids[i] for i in ds.sequences[u]]
    assert items == ["i4", "i3", "i2", "i1", "i0"]
    assert np.all(np.diff(ds.timestamps[u]) >= 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 7), min_size=3, max_size=9), min_size=1, max_size=12))
def test_split_partitions_each_sequence(seqs):
    ds = make_dataset(seqs)
    for u, seq in enumerate(ds.sequences):
        rebuilt = np.concatenate([ds.train[u], [ds.val[u], ds.test[u]]])
        assert np.array_equal(rebuilt, seq)


def test_snapshot_roundtrip(tmp_path, small_ds):
    small_ds.save(tmp_path / "ds.json")
    assert Dataset.load(tmp_path / "ds.json").same_content(small_ds)


# -- targets -----------------------------------------------------------------------
def test_target_sizes_and_eligibility():
    ds = build_dataset(make_synthetic_log(SynthConfig(n_users=400, n_items=200, seed=5)))
    spec = select_targets(ds, 20, 20, seed=1)
    assert len(spec.target_items) == 20 and len(spec.target_users) == 20
    tset = set(spec.target_items)
    assert all(not tset & ds.train_set(u) for u in spec.target_users)
    pop = ds.popularity()
    assert all(pop[i] <= np.quantile(pop, 0.75) for i in spec.target_items)


def test_targets_deterministic(small_ds):
    assert select_targets(small_ds, 5, 5, seed=9) == select_targets(small_ds, 5, 5, seed=9)


def test_all_items_uniform_popularity_relaxes_quartile():
    # every item consumed exactly once by some user; the pool covers the catalog
    seqs = [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11], [12, 13, 14, 15]]
    ds = make_dataset(seqs)
    spec = select_targets(ds, ds.n_items, 0, seed=0)
    assert sorted(spec.target_items) == list(range(ds.n_items))


def test_no_eligible_users_is_fatal():
    ds = make_dataset([[0, 1, 0, 1], [1, 0, 1, 0]])  # both items sit in every training history
    for seed in range(5):
        with pytest.raises(DataError):
            select_targets(ds, 1, 1, seed=seed)


def test_target_size_bounds(small_ds):
    with pytest.raises(DataError):
        select_targets(small_ds, small_ds.n_items + 1, 1)
