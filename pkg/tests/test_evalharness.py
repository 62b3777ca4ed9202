import json

import numpy as np
import pytest

from poisonforge.attacks import InjectedSequences
from poisonforge.data import TargetSpec
from poisonforge.evalharness import (
    CampaignConfig,
    StageError,
    display_rate,
    evaluate_injection,
    inject,
    length_distribution_report,
    prepare_lab,
    run_campaign,
    run_sweep,
)
from poisonforge.recmodels.base import Ranking

from conftest import make_dataset

SMALL = {
    "dataset": {"synthetic": {"n_users": 220, "n_items": 110, "n_clusters": 5}},
    "n_target_items": 5, "n_target_users": 10, "retrain_seeds": 1, "m_actions": 5,
    "dqn": {"epochs": 10}, "lissa": {"depth": 200, "scale": "auto", "damping": 1e-3, "batch": 0},
    "sweep": {"user_fraction": [0.02, 0.05], "m_actions": [5, 6]},
}


class FixedRanker:
    def __init__(self, order):
        self.order = np.asarray(order)

    def top_k(self, u, history, k):
        keep = self.order[~np.isin(self.order, history)][:k]
        return Ranking(keep, False)


# -- injection --------------------------------------------------------------------------
def test_inject_appends_training_only_users():
    ds = make_dataset([[0, 1, 2, 3], [1, 2, 3, 0]])
    out = inject(ds, InjectedSequences([[3, 1], [0, 2, 1]], "random"))
    assert out.n_users == 4 and out.n_items == ds.n_items
    assert out.user_ids[2:] == ("random-0", "random-1")
    assert out.train[2].tolist() == [3, 1] and not out.heldout[2:].any()
    for u in range(2):
        assert np.array_equal(out.sequences[u], ds.sequences[u])
        assert out.val[u] == ds.val[u] and out.test[u] == ds.test[u]
    assert out.timestamps[2][0] > max(t.max() for t in ds.timestamps)


def test_inject_nothing_is_identity():
    ds = make_dataset([[0, 1, 2]])
    assert inject(ds, []) is ds
    with pytest.raises(ValueError):
        inject(ds, [[7]])


# -- display rate ------------------------------------------------------------------------
def test_display_rate_example():
    ds = make_dataset([[0, 1, 2]] * 20)
    # only users 0..2 get the target at the top
    class Split:
        def top_k(self, u, history, k):
            return Ranking(np.array([5 if u < 3 else 4]), False)

    spec = TargetSpec((5,), tuple(range(20)))
    assert display_rate(Split(), ds, spec, 1) == pytest.approx(0.15)


def test_display_rate_full_catalog_and_monotone():
    ds = make_dataset([[0, 1, 2, 3], [2, 3, 4, 5], [6, 7, 8, 9]])
    spec = TargetSpec((9,), (0, 1))
    r = FixedRanker(np.arange(10))
    assert display_rate(r, ds, spec, ds.n_items) == 1.0
    rates = [display_rate(r, ds, spec, k) for k in range(1, ds.n_items + 1)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert display_rate(r, ds, TargetSpec((9,), ()), 3) == 0.0


# -- length report ------------------------------------------------------------------------
def test_length_report_without_injection():
    ds = make_dataset([[0, 1, 2], [0, 1, 2, 3, 4]])
    rep = length_distribution_report(ds, ds)
    assert np.array_equal(rep.before, rep.after) and rep.tv_distance == 0.0
    assert not rep.injected.any()


def test_length_report_tv_distance(tmp_path):
    ds = make_dataset([[0, 1, 2], [0, 1, 2, 3]])
    after = inject(ds, [[0, 1, 2]])
    rep = length_distribution_report(ds, after)
    # before: {3: .5, 4: .5}; after: {3: 2/3, 4: 1/3}
    assert rep.tv_distance == pytest.approx(1 / 6)
    assert rep.injected.tolist() == [0, 0, 0, 1, 0]
    rep.write_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "length,before,after,injected"


# -- config ---------------------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError, match="m_actions"):
        CampaignConfig(m_actions=4)
    with pytest.raises(ValueError, match="m_actions"):
        CampaignConfig.from_dict({"sweep": {"m_actions": [3]}})
    with pytest.raises(ValueError, match="unknown config keys"):
        CampaignConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        CampaignConfig(attacks=["none", "sybil"])
    with pytest.raises(ValueError):
        CampaignConfig(target_models=["gru4rec"])
    with pytest.raises(ValueError):
        CampaignConfig(dataset={})


def test_partial_sections_merge_with_defaults():
    cfg = CampaignConfig.from_dict({"dqn": {"epochs": 3}, "lissa": {"depth": 10}})
    assert cfg.dqn["epochs"] == 3 and cfg.dqn["top_share"] == 0.25
    assert cfg.lissa["depth"] == 10 and cfg.lissa["scale"] == "auto"
    assert CampaignConfig.from_dict(cfg.to_dict()) == cfg


def test_stage_failure_names_stage():
    cfg = CampaignConfig.from_dict({**SMALL, "n_target_users": 100_000})
    with pytest.raises(StageError, match="targets"):
        prepare_lab(cfg)


# -- campaigns --------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_report():
    return run_campaign(CampaignConfig.from_dict(SMALL))


def test_campaign_shape_and_control(small_report):
    point = small_report.points[0]
    assert {(r["attack"], r["target_model"]) for r in point["results"]} == \
        {(a, k) for a in ("none", "random", "popular", "loki") for k in ("bprmf", "fpmc")}
    for r in point["results"]:
        assert 0.0 <= r["display_rate"] <= 1.0
        assert r["n_sequences"] == (0 if r["attack"] == "none" else point["n_controlled"])
    assert all(len(s) <= SMALL["m_actions"] for seqs in point["injected"].values() for s in seqs)


def test_control_matches_direct_evaluation(small_report):
    lab = prepare_lab(CampaignConfig.from_dict({**SMALL, "attacks": ["none"]}), train_agent=False)
    for kind in ("bprmf", "fpmc"):
        assert evaluate_injection(lab, lab.ds, kind)[0] == small_report.display_rate("none", kind)


def test_campaign_is_deterministic(small_report, tmp_path):
    again = run_campaign(CampaignConfig.from_dict(SMALL))
    small_report.write(tmp_path / "a")
    again.write(tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert "total" in json.loads((tmp_path / "a" / "timings.json").read_text())


def test_sweep_grid_and_budget_trend():
    rep = run_sweep(CampaignConfig.from_dict({**SMALL, "attacks": ["none", "random"]}))
    grid = [(p["user_fraction"], p["m_actions"]) for p in rep.points]
    assert grid == [(0.02, 5), (0.02, 6), (0.05, 5), (0.05, 6)]
    n = {p["user_fraction"]: p["n_controlled"] for p in rep.points}
    assert n[0.02] < n[0.05]
    assert all(p["length_tv"]["random"] > 0 for p in rep.points)
    # more controlled users shift the length distribution further
    assert rep.points[0]["length_tv"]["random"] < rep.points[2]["length_tv"]["random"]
    # the control does not depend on the budget
    assert len({rep.display_rate("none", "bprmf", f, m) for f, m in grid}) == 1
