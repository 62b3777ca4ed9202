"""End-to-end campaigns: build the lab, train the agent, inject, retrain victims, measure display rate."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .actionspace import ItemGroups, build_action_space
from .agent import DqnConfig, QNetwork, train_dqn
from .attacks import InjectedSequences, loki_attack, n_controlled, popular_attack, random_attack
from .data import Dataset, TargetSpec, build_dataset, ingest_interactions, select_targets
from .influence import InfluenceEstimator, InfluenceReward, LissaConfig
from .recmodels import Hyper, train_model
from .recmodels.optim import polish
from .seeding import child_seed, substream
from .simulator import Ensemble
from .synth import SynthConfig, make_synthetic_log

logger = logging.getLogger(__name__)

ATTACKS = ("none", "random", "popular", "loki")
MIN_ACTIONS = 5
MERGED_SECTIONS = ("lissa", "dqn", "sweep")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# -- dataset surgery and metrics ------------------------------------------------
def inject(ds: Dataset, seqs: InjectedSequences | Sequence[Sequence[int]]) -> Dataset:
    """Append one training-only user per injected sequence; existing users are untouched."""
    if isinstance(seqs, InjectedSequences):
        tags, seq_list = list(seqs.users), list(seqs.sequences)
    else:
        seq_list = [tuple(s) for s in seqs]
        tags = [f"injected-{k}" for k in range(len(seq_list))]
    if not seq_list:
        return ds
    for s in seq_list:
        if any(not 0 <= int(i) < ds.n_items for i in s):
            raise ValueError("injected sequence holds an unknown item id")
    existing = set(ds.user_ids)
    tags = [t if t not in existing else f"{t}#injected" for t in tags]
    t0 = max((int(t[-1]) for t in ds.timestamps if len(t)), default=0) + 1
    return Dataset(
        ds.user_ids + tuple(tags),
        ds.item_ids,
        ds.sequences + tuple(np.asarray(s, dtype=np.int64) for s in seq_list),
        ds.timestamps + tuple(np.arange(t0, t0 + len(s), dtype=np.int64) for s in seq_list),
        np.concatenate([ds.heldout, np.zeros(len(seq_list), dtype=bool)]),
    )


def display_rate(model, ds: Dataset, targets: TargetSpec, k: int = 10) -> float:
    """Fraction of target users whose top-``k`` list (history excluded) shows any target item."""
    if not targets.target_users:
        return 0.0
    tset = np.asarray(targets.target_items, dtype=np.int64)
    hits = sum(bool(np.isin(model.top_k(u, ds.train[u], k).items, tset).any()) for u in targets.target_users)
    return hits / len(targets.target_users)


@dataclass
class LengthReport:
    lengths: np.ndarray  # shared bins: one per sequence length
    before: np.ndarray
    after: np.ndarray
    injected: np.ndarray  # after minus before (the injected cohort)
    tv_distance: float

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["length", "before", "after", "injected"])
            w.writerows(zip(self.lengths.tolist(), self.before.tolist(), self.after.tolist(), self.injected.tolist()))

    def to_json(self) -> dict:
        return {"lengths": self.lengths.tolist(), "before": self.before.tolist(), "after": self.after.tolist(),
                "injected": self.injected.tolist(), "tv_distance": self.tv_distance}


def length_distribution_report(before: Dataset, after: Dataset) -> LengthReport:
    """Sequence-length histograms over a shared integer binning, plus their total-variation distance."""
    lb = np.array([len(s) for s in before.sequences], dtype=np.int64)
    la = np.array([len(s) for s in after.sequences], dtype=np.int64)
    top = int(max(lb.max(initial=0), la.max(initial=0)))
    hb = np.bincount(lb, minlength=top + 1)
    ha = np.bincount(la, minlength=top + 1)
    tv = 0.5 * float(np.abs(hb / max(hb.sum(), 1) - ha / max(ha.sum(), 1)).sum())
    return LengthReport(np.arange(top + 1), hb, ha, ha - hb, tv)


# -- configuration ------------------------------------------------------------------
@dataclass
class CampaignConfig:
    """One JSON document per campaign; see README for the schema."""

    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    min_user_acts: int = 5
    min_item_acts: int = 5
    target_models: list = field(default_factory=lambda: ["bprmf", "fpmc"])
    ensemble: list = field(default_factory=lambda: [{"kind": "bprmf", "weight": 1.0}, {"kind": "fpmc", "weight": 1.0}])
    hyper: dict = field(default_factory=dict)  # kind -> Hyper fields
    attacks: list = field(default_factory=lambda: list(ATTACKS))
    user_fraction: float = 0.03
    m_actions: int = 15
    k: int = 10
    n_target_items: int = 20
    n_target_users: int = 20
    retrain_seeds: int = 3
    random_repo_size: int | None = None
    polish_simulator: bool = True  # Newton-refine simulator members before influence work
    normalize_members: bool = True  # put member influences on a common scale before weighting
    nmf_rank: int = 16
    n_clusters: int = 8
    nmf_iters: int = 200
    lissa: dict = field(default_factory=lambda: {"depth": 3000, "scale": "auto", "damping": 1e-3,
                                                  "batch": 0, "repeats": 1})
    dqn: dict = field(default_factory=lambda: {"updates_per_epoch": 32, "learning_rate": 0.003, "top_share": 0.25})
    sweep: dict = field(default_factory=lambda: {"user_fraction": [0.01, 0.02, 0.03], "m_actions": [5, 10, 15]})
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        unknown = set(self.attacks) - set(ATTACKS)
        if unknown:
            raise ValueError(f"unknown attack kinds {sorted(unknown)}")
        kinds = {"bprmf", "fpmc"}
        if not self.target_models or set(self.target_models) - kinds:
            raise ValueError(f"target_models must be drawn from {sorted(kinds)}")
        if not self.ensemble or any(m.get("kind") not in kinds for m in self.ensemble):
            raise ValueError(f"ensemble kinds must be drawn from {sorted(kinds)}")
        for m in [self.m_actions, *self.sweep.get("m_actions", [])]:
            if m < MIN_ACTIONS:
                # injected users skip the activity filter, so they must clear it on their own
                raise ValueError(f"m_actions must be >= {MIN_ACTIONS}, got {m}")
        if self.k < 1 or self.retrain_seeds < 1:
            raise ValueError("k and retrain_seeds must be >= 1")
        if not 0 <= self.user_fraction <= 1:
            raise ValueError("user_fraction must lie in [0, 1]")
        if "path" not in self.dataset and "synthetic" not in self.dataset:
            raise ValueError("dataset needs a 'path' or a 'synthetic' section")

    @classmethod
    def from_dict(cls, obj: dict | None) -> CampaignConfig:
        obj = dict(obj or {})
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        for key in MERGED_SECTIONS:
            # partial sections override individual defaults rather than replacing them
            if isinstance(obj.get(key), dict):
                obj[key] = {**cls.__dataclass_fields__[key].default_factory(), **obj[key]}
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> CampaignConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def hyper_for(self, kind: str) -> Hyper:
        return Hyper.from_dict(self.hyper.get(kind))

    def dqn_config(self, m_actions: int | None = None) -> DqnConfig:
        d = {"seed": child_seed(self.seed, "dqn"), **self.dqn}
        d["m_actions"] = m_actions or self.m_actions
        return DqnConfig.from_dict(d)


def load_dataset(cfg: CampaignConfig) -> Dataset:
    src = cfg.dataset
    if "path" in src:
        path = Path(src["path"])
        if path.suffix == ".json":
            return Dataset.load(path)
        log = ingest_interactions(path, src.get("format", "jsonl" if path.suffix == ".jsonl" else "csv"))
    else:
        synth = {"seed": child_seed(cfg.seed, "synth"), **src["synthetic"]}
        log = make_synthetic_log(SynthConfig.from_dict(synth))
    return build_dataset(log, cfg.min_user_acts, cfg.min_item_acts)


# -- pipeline ---------------------------------------------------------------------------
@dataclass
class Lab:
    """Everything the attacker prepares on clean data before any injection."""

    cfg: CampaignConfig
    ds: Dataset
    targets: TargetSpec
    ensemble: Ensemble
    groups: ItemGroups
    agent: QNetwork | None = None
    agent_log: list = field(default_factory=list)
    reward_scale: float = 1.0
    timings: dict = field(default_factory=dict)


class _Timer:
    def __init__(self, timings: dict, stage: str):
        self.timings, self.stage = timings, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        logger.info("stage %s", self.stage)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.stage] = self.timings.get(self.stage, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.stage, exc) from exc
        return False


def build_targets(cfg: CampaignConfig, ds: Dataset) -> TargetSpec:
    return select_targets(ds, cfg.n_target_items, cfg.n_target_users, child_seed(cfg.seed, "targets"))


def build_simulator(cfg: CampaignConfig, ds: Dataset) -> Ensemble:
    """Train (and optionally polish) the configured simulator members on clean data."""
    members = [train_model(m["kind"], ds, cfg.hyper_for(m["kind"]), child_seed(cfg.seed, f"simulator/{j}"))
               for j, m in enumerate(cfg.ensemble)]
    if cfg.polish_simulator:
        members = [polish(m)[0] for m in members]
    return Ensemble(members, [float(m.get("weight", 1.0)) for m in cfg.ensemble])


def build_groups(cfg: CampaignConfig, ds: Dataset, targets: TargetSpec) -> ItemGroups:
    return build_action_space(ds, targets, cfg.nmf_rank, cfg.n_clusters, cfg.nmf_iters,
                              child_seed(cfg.seed, "actionspace"))


def prepare_lab(cfg: CampaignConfig, train_agent: bool = True, horizon: int | None = None) -> Lab:
    timings: dict = {}
    with _Timer(timings, "dataset"):
        ds = load_dataset(cfg)
    with _Timer(timings, "targets"):
        targets = build_targets(cfg, ds)
    with _Timer(timings, "simulator"):
        ens = build_simulator(cfg, ds)
    with _Timer(timings, "groups"):
        groups = build_groups(cfg, ds, targets)
    lab = Lab(cfg, ds, targets, ens, groups, timings=timings)
    if train_agent and "loki" in cfg.attacks:
        train_lab_agent(lab, horizon or cfg.m_actions)
    return lab


def make_reward(lab: Lab, horizon: int) -> InfluenceReward:
    lissa = LissaConfig.from_dict({"seed": child_seed(lab.cfg.seed, "lissa"), **lab.cfg.lissa})
    est = InfluenceEstimator(lab.ensemble, lab.ds, lab.targets, lissa, child_seed(lab.cfg.seed, "influence"),
                             max_len=horizon, normalize=lab.cfg.normalize_members)
    return InfluenceReward(est)


def train_lab_agent(lab: Lab, horizon: int) -> None:
    with _Timer(lab.timings, "influence"):
        reward = make_reward(lab, horizon)
    with _Timer(lab.timings, "agent"):
        net, log = train_dqn(lab.groups, reward, lab.cfg.dqn_config(horizon))
    lab.agent, lab.agent_log, lab.reward_scale = net, log.rows, log.reward_scale


def generate_attack(lab: Lab, kind: str, n_users: int, m_actions: int) -> InjectedSequences:
    rng = substream(lab.cfg.seed, f"attack/{kind}/{n_users}/{m_actions}")
    if kind == "none":
        return InjectedSequences([], "none")
    if kind == "random":
        return random_attack(lab.ds, lab.targets, n_users, m_actions, lab.cfg.random_repo_size, rng)
    if kind == "popular":
        return popular_attack(lab.ds, lab.targets, n_users, m_actions, rng)
    if kind == "loki":
        if lab.agent is None:
            raise RuntimeError("LOKI agent has not been trained")
        return loki_attack(lab.agent, lab.groups, n_users, m_actions, rng)
    raise ValueError(f"unknown attack {kind!r}")


def evaluate_injection(lab: Lab, poisoned: Dataset, kind: str) -> list[float]:
    """Display rate of freshly trained ``kind`` targets, one per retrain seed.

    Retrain seeds depend only on the master seed, so every attack is scored
    against identically initialized targets.
    """
    rates = []
    for r in range(lab.cfg.retrain_seeds):
        model = train_model(kind, poisoned, lab.cfg.hyper_for(kind), child_seed(lab.cfg.seed, f"target/{kind}/{r}"))
        rates.append(display_rate(model, poisoned, lab.targets, lab.cfg.k))
    return rates


def run_point(lab: Lab, user_fraction: float, m_actions: int) -> dict:
    """All configured attacks at one budget point."""
    n_users = n_controlled(lab.ds, user_fraction)
    point = {"user_fraction": user_fraction, "m_actions": m_actions, "n_controlled": n_users, "results": []}
    timings = {}
    for attack in lab.cfg.attacks:
        with _Timer(timings, f"generate/{attack}"):
            seqs = generate_attack(lab, attack, n_users, m_actions)
        poisoned = inject(lab.ds, seqs)
        for kind in lab.cfg.target_models:
            with _Timer(timings, f"retrain/{attack}/{kind}"):
                rates = evaluate_injection(lab, poisoned, kind)
            point["results"].append({
                "attack": attack, "target_model": kind, "display_rate": float(np.mean(rates)),
                "per_seed": rates, "n_sequences": len(seqs), "fallbacks": seqs.n_fallbacks,
            })
        if attack != "none":
            point.setdefault("length_tv", {})[attack] = length_distribution_report(lab.ds, poisoned).tv_distance
            point.setdefault("injected", {})[attack] = [list(s) for s in seqs.sequences]
    point["timings"] = timings
    return point


@dataclass
class CampaignReport:
    config: dict
    dataset: dict
    targets: dict
    points: list
    agent_log: list = field(default_factory=list)
    reward_scale: float = 1.0
    length_histograms: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def display_rate(self, attack: str, target_model: str, user_fraction: float | None = None,
                     m_actions: int | None = None) -> float:
        for p in self.points:
            if (user_fraction is None or np.isclose(p["user_fraction"], user_fraction)) and \
                    (m_actions is None or p["m_actions"] == m_actions):
                for r in p["results"]:
                    if r["attack"] == attack and r["target_model"] == target_model:
                        return r["display_rate"]
        raise KeyError((attack, target_model, user_fraction, m_actions))

    def results_table(self) -> list[dict]:
        return [{"user_fraction": p["user_fraction"], "m_actions": p["m_actions"], "n_controlled": p["n_controlled"],
                 "attack": r["attack"], "target_model": r["target_model"], "display_rate": r["display_rate"],
                 "per_seed": " ".join(f"{x:.6f}" for x in r["per_seed"])}
                for p in self.points for r in p["results"]]

    def to_json(self, include_timings: bool = True) -> dict:
        d = asdict(self)
        if not include_timings:
            d.pop("timings")
            for p in d["points"]:
                p.pop("timings", None)
        return d

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "results": out / "results.csv", "timings": out / "timings.json"}
        # timings live in their own file so report.json is byte-reproducible
        paths["report"].write_text(json.dumps(self.to_json(include_timings=False), indent=1, sort_keys=True))
        paths["timings"].write_text(json.dumps(
            {"total": self.timings, "points": [p.get("timings", {}) for p in self.points]}, indent=1, sort_keys=True))
        rows = self.results_table()
        with paths["results"].open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["attack"])
            w.writeheader()
            w.writerows(rows)
        for attack, hist in self.length_histograms.items():
            p = out / f"lengths_{attack}.csv"
            LengthReport(*(np.asarray(hist[k]) for k in ("lengths", "before", "after", "injected")),
                         hist["tv_distance"]).write_csv(p)
            paths[f"lengths_{attack}"] = p
        return paths


def _report(lab: Lab, points: list[dict]) -> CampaignReport:
    hists = {}
    last = points[-1] if points else None
    if last is not None:
        for attack, seqs in last.get("injected", {}).items():
            hists[attack] = length_distribution_report(lab.ds, inject(lab.ds, seqs)).to_json()
    timings = dict(lab.timings)
    for p in points:
        for k, v in p.get("timings", {}).items():
            timings[k] = timings.get(k, 0.0) + v
    return CampaignReport(
        config=lab.cfg.to_dict(),
        dataset={"n_users": lab.ds.n_users, "n_items": lab.ds.n_items,
                 "n_actions": int(sum(len(s) for s in lab.ds.sequences))},
        targets=lab.targets.to_json(),
        points=points,
        agent_log=lab.agent_log,
        reward_scale=lab.reward_scale,
        length_histograms=hists,
        timings=timings,
    )


def run_campaign(cfg: CampaignConfig) -> CampaignReport:
    """Prepare on clean data, attack at the configured budget, retrain targets, report display rates."""
    lab = prepare_lab(cfg)
    return _report(lab, [run_point(lab, cfg.user_fraction, cfg.m_actions)])


def _point_worker(args):
    lab, f, m = args
    return run_point(lab, f, m)


def run_sweep(cfg: CampaignConfig, jobs: int = 1) -> CampaignReport:
    """Grid over ``sweep.user_fraction`` x ``sweep.m_actions``.

    The simulator, action space and agent are shared by every point; the
    agent is trained once at the largest horizon and rolled out for fewer
    steps where the budget is smaller.
    """
    fractions = cfg.sweep.get("user_fraction", [cfg.user_fraction])
    actions = cfg.sweep.get("m_actions", [cfg.m_actions])
    lab = prepare_lab(cfg, horizon=max(actions))
    grid = [(lab, f, m) for f, m in itertools.product(fractions, actions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_point_worker, grid))
    else:
        points = [_point_worker(g) for g in grid]
    return _report(lab, points)
