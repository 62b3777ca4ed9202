"""Group-level action space: NMF item features, k-means clusters and two special groups."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import Dataset, TargetSpec
from .seeding import substream

TARGET_GROUP = 0
HISTORY_GROUP = 1


def interaction_matrix(ds: Dataset) -> np.ndarray:
    """Binary users x items matrix of training interactions."""
    X = np.zeros((ds.n_users, ds.n_items))
    for u, seq in enumerate(ds.train):
        X[u, seq] = 1.0
    return X


def _mu_step(A: np.ndarray, num: np.ndarray, den: np.ndarray) -> None:
    # update only where the denominator is positive; elsewhere the factor stays put
    pos = den > 0
    A[pos] *= num[pos] / den[pos]


def nmf(X: np.ndarray, rank: int, iters: int = 200, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factor a nonnegative matrix as ``X ~ W @ H.T`` with multiplicative updates.

    Returns
    -------
    W : (rows, rank) array
    H : (cols, rank) array
    errors : (iters + 1,) array
        Frobenius reconstruction error before the first and after every iteration.
        The Lee-Seung updates never increase it.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or np.any(X < 0):
        raise ValueError("X must be a nonnegative matrix")
    rng = substream(seed, "nmf")
    scale = np.sqrt(max(X.mean(), 1e-12) / rank)
    W = rng.uniform(0.0, 2.0 * scale, size=(X.shape[0], rank))
    H = rng.uniform(0.0, 2.0 * scale, size=(X.shape[1], rank))
    errors = np.empty(iters + 1)
    errors[0] = np.linalg.norm(X - W @ H.T)
    for k in range(iters):
        _mu_step(W, X @ H, W @ (H.T @ H))
        _mu_step(H, X.T @ W, H @ (W.T @ W))
        if not (np.isfinite(W).all() and np.isfinite(H).all()):
            raise FloatingPointError(f"non-finite NMF factor at iteration {k}")
        errors[k + 1] = np.linalg.norm(X - W @ H.T)
    return W, H, errors


def nmf_item_features(ds: Dataset, rank: int = 16, iters: int = 200, seed: int = 0) -> np.ndarray:
    """Nonnegative item factors (items x rank) of the binary training matrix."""
    return nmf(interaction_matrix(ds), rank, iters, seed)[1]


def wcss(features: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    return float(((features - centers[labels]) ** 2).sum())


def _kmeanspp(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, c):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else int(rng.integers(len(X)))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _assign(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def kmeans(features: np.ndarray, c: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm from a k-means++ start; returns a cluster label per row.

    A cluster that loses all its points is moved onto the point farthest
    from its current center, which can only lower the within-cluster sum of
    squares.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not 1 <= c <= len(X):
        raise ValueError(f"need 1 <= c <= {len(X)}, got {c}")
    rng = substream(seed, "kmeans")
    centers = _kmeanspp(X, c, rng)
    labels = _assign(X, centers)
    for _ in range(max_iters):
        for j in range(c):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(((X - centers[labels]) ** 2).sum(axis=1)))
                centers[j] = X[far]
                labels[far] = j
        new = _assign(X, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


class Draw(NamedTuple):
    item: int
    group: int  # group the item actually came from
    fallback: bool  # requested group was exhausted


@dataclass(frozen=True)
class ItemGroups:
    """Disjoint item groups; group 0 holds the targets, group 1 the target users' histories.

    ``kinds`` labels each group ("target", "history" or "cluster").  When the
    history group would be empty it is dropped, as are empty clusters.
    """

    groups: tuple[tuple[int, ...], ...]
    kinds: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.groups) != len(self.kinds):
            raise ValueError("one kind per group")
        if not self.groups or self.kinds[0] != "target":
            raise ValueError("group 0 must be the target group")
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty group")
        seen = [i for g in self.groups for i in g]
        if len(seen) != len(set(seen)):
            raise ValueError("groups overlap")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self) -> dict[int, int]:
        return {i: g for g, items in enumerate(self.groups) for i in items}

    def to_json(self) -> dict:
        return {"groups": {str(g): list(items) for g, items in enumerate(self.groups)}, "kinds": list(self.kinds)}

    @classmethod
    def from_json(cls, obj: dict) -> ItemGroups:
        groups = obj["groups"]
        return cls(tuple(tuple(int(i) for i in groups[str(g)]) for g in range(len(groups))), tuple(obj["kinds"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> ItemGroups:
        return cls.from_json(json.loads(Path(path).read_text()))


def build_groups(ds: Dataset, targets: TargetSpec, assignments: Sequence[int]) -> ItemGroups:
    """Targets first, then the target users' training items, then one group per cluster label.

    Special-group membership wins over cluster membership.
    """
    assignments = np.asarray(assignments)
    if len(assignments) != ds.n_items:
        raise ValueError("assignments must cover every item")
    target = sorted(set(int(i) for i in targets.target_items))
    if not target:
        raise ValueError("target group is empty")
    special = set(target)
    history = sorted(set(int(i) for u in targets.target_users for i in ds.train[u]) - special)
    special.update(history)
    groups, kinds = [tuple(target)], ["target"]
    if history:
        groups.append(tuple(history))
        kinds.append("history")
    for label in np.unique(assignments):
        items = tuple(int(i) for i in np.flatnonzero(assignments == label) if int(i) not in special)
        if items:
            groups.append(items)
            kinds.append("cluster")
    return ItemGroups(tuple(groups), tuple(kinds))


def build_action_space(ds: Dataset, targets: TargetSpec, rank: int = 16, n_clusters: int = 8,
                       nmf_iters: int = 200, seed: int = 0) -> ItemGroups:
    """NMF features, then k-means over the items outside the special groups."""
    features = nmf_item_features(ds, rank, nmf_iters, seed)
    special = set(int(i) for i in targets.target_items)
    special.update(int(i) for u in targets.target_users for i in ds.train[u])
    rest = np.array([i for i in range(ds.n_items) if i not in special], dtype=np.int64)
    assignments = np.zeros(ds.n_items, dtype=np.int64)
    if len(rest):
        assignments[rest] = kmeans(features[rest], min(n_clusters, len(rest)), seed)
    return build_groups(ds, targets, assignments)


def sample_item(groups: ItemGroups, group_id: int, forbidden, rng: np.random.Generator) -> Draw:
    """Uniform item from ``group_id`` minus ``forbidden``.

    If that group is exhausted, a uniformly random group that still has free
    items is used instead and the draw is flagged.
    """
    if not 0 <= group_id < groups.n_groups:
        raise ValueError(f"invalid group {group_id}")
    free = [i for i in groups.groups[group_id] if i not in forbidden]
    if free:
        return Draw(free[int(rng.integers(len(free)))], group_id, False)
    open_groups = [g for g, items in enumerate(groups.groups) if any(i not in forbidden for i in items)]
    if not open_groups:
        raise ValueError("every group is exhausted")
    g = open_groups[int(rng.integers(len(open_groups)))]
    free = [i for i in groups.groups[g] if i not in forbidden]
    return Draw(free[int(rng.integers(len(free)))], g, True)
