"""Interaction logs, filtered datasets with leave-one-out splits, and target selection."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import substream

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "poisonforge.dataset"
SNAPSHOT_VERSION = 1

Record = tuple[str, str, int]


class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Raw ``(user, item, timestamp)`` records in input order.

    Exact duplicate records are dropped on construction; repeated purchases of
    one item at distinct timestamps are kept.
    """

    records: list[Record] = field(default_factory=list)
    skipped: int = 0
    duplicates: int = 0

    def __post_init__(self) -> None:
        seen: set[Record] = set()
        unique: list[Record] = []
        for rec in self.records:
            rec = (str(rec[0]), str(rec[1]), int(rec[2]))
            if rec in seen:
                self.duplicates += 1
                continue
            seen.add(rec)
            unique.append(rec)
        self.records = unique

    def __len__(self) -> int:
        return len(self.records)


def _parse_ts(raw) -> int:
    if isinstance(raw, bool):
        raise ValueError("boolean timestamp")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, float):
        if not raw.is_integer():
            raise ValueError("fractional timestamp")
        return int(raw)
    return int(str(raw).strip())


def ingest_interactions(path: str | Path, format: str = "csv") -> InteractionLog:
    """Read an interaction log.

    CSV files need a ``user,item,timestamp`` header; JSONL files hold one
    object per line with keys ``user``, ``item`` and ``ts``.  Malformed lines
    are skipped and counted in ``InteractionLog.skipped``.
    """
    path = Path(path)
    records: list[Record] = []
    skipped = 0
    if format == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return InteractionLog()
            cols = [h.strip() for h in header]
            try:
                iu, ii, it = cols.index("user"), cols.index("item"), cols.index("timestamp")
            except ValueError:
                raise DataError(f"{path}: CSV header must contain user,item,timestamp; got {cols}") from None
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    user, item = row[iu].strip(), row[ii].strip()
                    if not user or not item:
                        raise ValueError("empty id")
                    records.append((user, item, _parse_ts(row[it])))
                except (IndexError, ValueError):
                    skipped += 1
    elif format == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    user, item = obj["user"], obj["item"]
                    if user is None or item is None or str(user) == "" or str(item) == "":
                        raise ValueError("empty id")
                    records.append((str(user), str(item), _parse_ts(obj["ts"])))
                except (ValueError, KeyError, TypeError):
                    skipped += 1
    else:
        raise DataError(f"unknown log format {format!r}; expected csv or jsonl")
    if skipped:
        logger.warning("%s: skipped %d malformed line(s)", path, skipped)
    return InteractionLog(records, skipped=skipped)


def write_log_csv(log: InteractionLog | Iterable[Record], path: str | Path) -> None:
    records = log.records if isinstance(log, InteractionLog) else list(log)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "timestamp"])
        writer.writerows(records)


@dataclass(eq=False)
class Dataset:
    """Per-user chronological item sequences over dense integer ids.

    Users with ``heldout[u]`` true are split leave-one-out: the last item is
    the test item, the one before it the validation item, the rest is the
    training prefix.  Injected (controlled) users carry training items only.
    """

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    sequences: tuple[np.ndarray, ...]
    timestamps: tuple[np.ndarray, ...]
    heldout: np.ndarray
    source: InteractionLog | None = None

    def __post_init__(self) -> None:
        self.sequences = tuple(np.asarray(s, dtype=np.int64) for s in self.sequences)
        self.timestamps = tuple(np.asarray(t, dtype=np.int64) for t in self.timestamps)
        self.heldout = np.asarray(self.heldout, dtype=bool)
        train = []
        val = np.full(self.n_users, -1, dtype=np.int64)
        test = np.full(self.n_users, -1, dtype=np.int64)
        for u, seq in enumerate(self.sequences):
            if self.heldout[u]:
                train.append(seq[:-2])
                val[u], test[u] = seq[-2], seq[-1]
            else:
                train.append(seq)
        self.train = tuple(train)
        self.val = val
        self.test = test
        self._train_sets: list[frozenset[int]] | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def train_set(self, u: int) -> frozenset[int]:
        if self._train_sets is None:
            self._train_sets = [frozenset(t.tolist()) for t in self.train]
        return self._train_sets[u]

    def popularity(self) -> np.ndarray:
        """Training interaction count per item."""
        counts = np.zeros(self.n_items, dtype=np.int64)
        for seq in self.train:
            np.add.at(counts, seq, 1)
        return counts

    def heldout_users(self) -> np.ndarray:
        return np.flatnonzero(self.heldout)

    def to_log(self) -> InteractionLog:
        if self.source is not None:
            return InteractionLog(list(self.source.records))
        records = []
        for u, (seq, ts) in enumerate(zip(self.sequences, self.timestamps)):
            records.extend((self.user_ids[u], self.item_ids[i], int(t)) for i, t in zip(seq, ts))
        return InteractionLog(records)

    def same_content(self, other: Dataset) -> bool:
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.heldout, other.heldout)
            and all(np.array_equal(a, b) for a, b in zip(self.sequences, other.sequences))
            and all(np.array_equal(a, b) for a, b in zip(self.timestamps, other.timestamps))
        )

    def to_json(self) -> dict:
        return {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "users": list(self.user_ids),
            "items": list(self.item_ids),
            "sequences": [s.tolist() for s in self.sequences],
            "timestamps": [t.tolist() for t in self.timestamps],
            "heldout": self.heldout.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Dataset:
        if obj.get("format") != SNAPSHOT_FORMAT:
            raise DataError("not a dataset snapshot")
        if obj.get("version") != SNAPSHOT_VERSION:
            raise DataError(f"unsupported dataset snapshot version {obj.get('version')}")
        return cls(
            tuple(obj["users"]),
            tuple(obj["items"]),
            tuple(np.array(s, dtype=np.int64) for s in obj["sequences"]),
            tuple(np.array(t, dtype=np.int64) for t in obj["timestamps"]),
            np.array(obj["heldout"], dtype=bool),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        return cls.from_json(json.loads(Path(path).read_text()))


def filter_fixpoint(records: Sequence[Record], min_user_acts: int, min_item_acts: int) -> list[Record]:
    """Drop sparse users and items repeatedly until both thresholds hold.

    A user needs ``min_user_acts`` activities; an item needs to appear in the
    sequences of ``min_item_acts`` distinct users.
    """
    records = list(records)
    while True:
        user_counts = Counter(r[0] for r in records)
        item_users = Counter(i for (_, i) in {(r[0], r[1]) for r in records})
        kept = [r for r in records if user_counts[r[0]] >= min_user_acts and item_users[r[1]] >= min_item_acts]
        if len(kept) == len(records):
            return kept
        records = kept


def build_dataset(log: InteractionLog, min_user_acts: int = 5, min_item_acts: int = 5) -> Dataset:
    if not len(log):
        raise DataError("empty interaction log")
    # the leave-one-out split needs train/val/test, hence at least 3 actions
    kept = filter_fixpoint(log.records, max(min_user_acts, 3), min_item_acts)
    if not kept:
        raise DataError("empty dataset: every user was filtered out")

    users: dict[str, int] = {}
    items: dict[str, int] = {}
    per_user: list[list[tuple[int, int, int]]] = []
    for order, (user, item, ts) in enumerate(kept):
        if user not in users:
            users[user] = len(users)
            per_user.append([])
        if item not in items:
            items[item] = len(items)
        per_user[users[user]].append((ts, order, items[item]))

    sequences, timestamps = [], []
    for acts in per_user:
        acts.sort()
        sequences.append(np.array([a[2] for a in acts], dtype=np.int64))
        timestamps.append(np.array([a[0] for a in acts], dtype=np.int64))
    return Dataset(
        tuple(users),
        tuple(items),
        tuple(sequences),
        tuple(timestamps),
        np.ones(len(users), dtype=bool),
        source=InteractionLog(kept),
    )


@dataclass(frozen=True)
class TargetSpec:
    target_items: tuple[int, ...]
    target_users: tuple[int, ...]

    def to_json(self) -> dict:
        return {"target_items": list(self.target_items), "target_users": list(self.target_users)}

    @classmethod
    def from_json(cls, obj: dict) -> TargetSpec:
        return cls(tuple(int(i) for i in obj["target_items"]), tuple(int(u) for u in obj["target_users"]))


def select_targets(ds: Dataset, n_items: int = 20, n_users: int = 20, seed: int = 0) -> TargetSpec:
    """Pick target items outside the top popularity quartile, then target users.

    Items are drawn uniformly from those whose training popularity is at most
    the 75th percentile; when that pool is smaller than ``n_items`` the whole
    catalog is used.  Users are drawn uniformly among held-out users whose
    training history contains none of the chosen items.
    """
    if not 0 <= n_items <= ds.n_items:
        raise DataError(f"n_items={n_items} outside [0, {ds.n_items}]")
    if not 0 <= n_users <= ds.n_users:
        raise DataError(f"n_users={n_users} outside [0, {ds.n_users}]")
    rng = substream(seed, "targets")
    pop = ds.popularity()
    pool = np.flatnonzero(pop <= np.quantile(pop, 0.75))
    if len(pool) < n_items:
        pool = np.arange(ds.n_items)
    chosen = np.sort(rng.choice(pool, size=n_items, replace=False))
    target_set = set(chosen.tolist())

    eligible = np.array(
        [u for u in ds.heldout_users() if not target_set & ds.train_set(int(u))], dtype=np.int64
    )
    if n_users > 0 and len(eligible) == 0:
        raise DataError("no eligible target users: every user already consumed a target item")
    if len(eligible) < n_users:
        raise DataError(f"only {len(eligible)} eligible target users, {n_users} requested")
    users = np.sort(rng.choice(eligible, size=n_users, replace=False)) if n_users else np.array([], dtype=np.int64)
    return TargetSpec(tuple(int(i) for i in chosen), tuple(int(u) for u in users))
