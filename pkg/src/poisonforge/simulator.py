"""Recommender simulator: weighted rank voting over locally trained models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .recmodels import rank_order


@dataclass
class Ensemble:
    members: list
    weights: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if not self.weights:
            self.weights = [1.0] * len(self.members)
        if len(self.weights) != len(self.members):
            raise ValueError("one weight per member required")
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be non-negative and not all zero")
        self.weights = [float(x) for x in w]

    @property
    def size(self) -> int:
        return len(self.members)


def member_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of each position under descending score, ties by ascending index."""
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[rank_order(scores)] = np.arange(1, len(scores) + 1)
    return ranks


def aggregate_ranks(
    ens: Ensemble, u: int, history: Sequence[int], candidate_pool: Sequence[int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Rank the pool by ``score(i) = -(1/M) * sum_m w_m * rank_m(i)``.

    ``rank_m`` is computed among pool items only.  The default pool is the
    full catalog minus ``history``.  Returns ``(items, scores)`` sorted by
    descending score with ties broken by ascending item index; scores
    within 1e-9 of each other (after dividing by the total weight) count as
    tied.
    """
    n_items = ens.members[0].n_items
    if candidate_pool is None:
        pool = np.setdiff1d(np.arange(n_items), np.asarray(history, dtype=np.int64))
    else:
        pool = np.unique(np.asarray(candidate_pool, dtype=np.int64))
    if not len(pool):
        raise ValueError("candidate pool is empty")
    total = np.zeros(len(pool))
    for model, w in zip(ens.members, ens.weights):
        total += w * member_ranks(np.asarray(model.scores(u, history), dtype=np.float64)[pool])
    agg = -total / ens.size
    # order on the weight-normalized vote, rounded so that rescaling the weights
    # cannot split exact ties through floating-point noise
    key = np.round(-total / sum(ens.weights), 9)
    order = rank_order(key)  # pool is sorted, so position order == item order
    return pool[order], agg[order]


class EnsembleRanker:
    """Adapter exposing an ensemble through the ``scores``/``top_k`` interface."""

    def __init__(self, ens: Ensemble):
        self.ens = ens
        self.n_items = ens.members[0].n_items

    def scores(self, u: int, history: Sequence[int] = ()) -> np.ndarray:
        items, agg = aggregate_ranks(self.ens, u, history, np.arange(self.n_items))
        out = np.empty(self.n_items)
        out[items] = agg
        return out

    def top_k(self, u: int, history: Sequence[int], k: int, exclude_history: bool = True):
        from .recmodels import top_k

        return top_k(self, u, history, k, exclude_history)
