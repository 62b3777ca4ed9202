"""Synthetic interaction logs with planted cluster and transition structure."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionLog
from .seeding import substream


@dataclass
class SynthConfig:
    n_users: int = 1000
    n_items: int = 400
    n_clusters: int = 10
    mean_len: float = 10.0
    min_len: int = 5
    max_len: int = 40
    p_transition: float = 0.6  # follow the current item's planted successors
    p_home: float = 0.8  # otherwise stay in the user's home cluster
    n_successors: int = 3
    zipf: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict | None) -> SynthConfig:
        return cls(**(obj or {}))


def make_synthetic_log(cfg: SynthConfig | None = None) -> InteractionLog:
    """Generate chronological user sequences.

    Items are split into contiguous clusters with Zipf popularity inside each
    cluster.  Each item has a few planted successors in its own cluster; a
    user starts in a home cluster and at every step either follows a
    successor of the current item, picks a popular item of the home cluster,
    or wanders to a popular item anywhere.
    """
    cfg = cfg or SynthConfig()
    rng = substream(cfg.seed, "synth")
    V, C = cfg.n_items, cfg.n_clusters
    cluster = np.arange(V) * C // V
    members = [np.flatnonzero(cluster == c) for c in range(C)]

    weight = np.empty(V)
    for m in members:
        ranks = rng.permutation(len(m))
        weight[m] = 1.0 / (ranks + 1.0) ** cfg.zipf
    cluster_p = [weight[m] / weight[m].sum() for m in members]
    global_p = weight / weight.sum()

    successors = np.empty((V, cfg.n_successors), dtype=np.int64)
    for i in range(V):
        pool = members[cluster[i]]
        pool = pool[pool != i]
        successors[i] = rng.choice(pool, size=cfg.n_successors, replace=len(pool) < cfg.n_successors,
                                   p=weight[pool] / weight[pool].sum())

    extra_mean = max(cfg.mean_len - cfg.min_len, 0.0)
    records = []
    for u in range(cfg.n_users):
        home = int(rng.integers(C))
        length = cfg.min_len + (int(rng.geometric(1.0 / (extra_mean + 1.0))) - 1 if extra_mean > 0 else 0)
        length = min(length, cfg.max_len)
        t = int(rng.integers(1_000_000, 2_000_000))
        item = int(rng.choice(members[home], p=cluster_p[home]))
        seq = [item]
        for _ in range(length - 1):
            r = rng.random()
            if r < cfg.p_transition:
                item = int(successors[item, rng.integers(cfg.n_successors)])
            elif r < cfg.p_transition + (1 - cfg.p_transition) * cfg.p_home:
                item = int(rng.choice(members[home], p=cluster_p[home]))
            else:
                item = int(rng.choice(V, p=global_p))
            seq.append(item)
        for item in seq:
            t += int(rng.integers(60, 86_400))
            records.append((f"u{u}", f"i{item}", t))
    return InteractionLog(records)
