"""Poisoning generators: Random and Popular baselines plus the learned LOKI policy."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actionspace import ItemGroups
from .agent import QNetwork, generate_poison_sequences
from .data import Dataset, TargetSpec

PROVENANCES = ("random", "popular", "loki")


@dataclass
class InjectedSequences:
    """One item sequence per controlled user, tagged with the generator that produced it."""

    sequences: list[tuple[int, ...]]
    provenance: str
    users: list[str] = field(default_factory=list)
    n_fallbacks: int = 0  # LOKI draws that fell back to another group

    def __post_init__(self) -> None:
        self.sequences = [tuple(int(i) for i in s) for s in self.sequences]
        if not self.users:
            self.users = [f"{self.provenance}-{k}" for k in range(len(self.sequences))]
        if len(self.users) != len(self.sequences):
            raise ValueError("one user tag per sequence")
        for s in self.sequences:
            if len(set(s)) != len(s):
                raise ValueError("an injected sequence repeats an item")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def max_len(self) -> int:
        return max((len(s) for s in self.sequences), default=0)

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for user, seq in zip(self.users, self.sequences):
                fh.write(json.dumps({"user": user, "items": list(seq), "provenance": self.provenance}) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> InjectedSequences:
        users, seqs, prov = [], [], set()
        with Path(path).open() as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    users.append(row["user"])
                    seqs.append(row["items"])
                    prov.add(row["provenance"])
        if len(prov) > 1:
            raise ValueError(f"mixed provenance in {path}: {sorted(prov)}")
        return cls(seqs, prov.pop() if prov else "none", users)


def n_controlled(ds: Dataset, fraction: float) -> int:
    """Budget in controlled users: ``round(fraction * |U|)``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    return int(round(fraction * ds.n_users))


def random_attack(ds: Dataset, targets: TargetSpec, n_users: int, m_actions: int,
                  repo_size: int | None = None, rng: np.random.Generator | None = None) -> InjectedSequences:
    """Each user draws ``m_actions`` distinct items from a private repository.

    The repository holds every target item plus uniformly chosen non-target
    fillers, up to ``repo_size`` items (default ``2 * m_actions``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    repo_size = 2 * m_actions if repo_size is None else repo_size
    if repo_size < m_actions:
        raise ValueError("repo_size must be >= m_actions")
    tset = sorted(set(targets.target_items))
    others = np.setdiff1d(np.arange(ds.n_items), tset)
    n_fill = min(max(repo_size - len(tset), 0), len(others))
    seqs = []
    for _ in range(n_users):
        repo = np.concatenate([np.asarray(tset, dtype=np.int64), rng.choice(others, n_fill, replace=False)])
        seqs.append(rng.choice(repo, min(m_actions, len(repo)), replace=False))
    return InjectedSequences(seqs, "random")


def popular_items(ds: Dataset) -> np.ndarray:
    """Items by descending training count, ties by ascending index."""
    pop = ds.popularity()
    return np.lexsort((np.arange(ds.n_items), -pop))


def popular_attack(ds: Dataset, targets: TargetSpec, n_users: int, m_actions: int,
                   rng: np.random.Generator | None = None) -> InjectedSequences:
    """Alternate popular items with targets: ``P1, T, P2, T', ...``.

    Targets are dealt round-robin, continuing across users so every target
    gets used.  A target slot whose next target is already in the sequence
    takes the next popular item instead.  ``rng`` is accepted for interface
    symmetry; the construction is deterministic.
    """
    if m_actions < 2:
        raise ValueError("popular attack needs m_actions >= 2")
    tlist = list(dict.fromkeys(int(i) for i in targets.target_items))
    if not tlist:
        raise ValueError("no target items")
    tset = set(tlist)
    popular = [int(i) for i in popular_items(ds) if int(i) not in tset]
    cursor = 0
    seqs = []
    for _ in range(n_users):
        seq: list[int] = []
        used: set[int] = set()
        p = 0
        for slot in range(m_actions):
            item = None
            if slot % 2 == 1:
                cand = tlist[cursor % len(tlist)]
                if cand not in used:
                    item = cand
                    cursor += 1
            if item is None:
                if p >= len(popular):
                    break
                item = popular[p]
                p += 1
            seq.append(item)
            used.add(item)
        seqs.append(seq)
    return InjectedSequences(seqs, "popular")


def loki_attack(net: QNetwork, groups: ItemGroups, n_users: int, m_actions: int,
                rng: np.random.Generator | None = None) -> InjectedSequences:
    """Greedy rollouts of a trained policy."""
    if not groups.groups or groups.kinds[0] != "target" or not groups.groups[0]:
        raise ValueError("action space has no target group")
    rng = rng if rng is not None else np.random.default_rng(0)
    gen = generate_poison_sequences(net, groups, n_users, m_actions, rng, greedy=True)
    return InjectedSequences(gen.sequences, "loki", n_fallbacks=gen.n_fallbacks)
