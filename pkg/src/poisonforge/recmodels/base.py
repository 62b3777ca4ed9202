"""Differentiable ranking-model contract shared by BPRMF and FPMC."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import ClassVar, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CONTROLLED = -1  # user index of a controlled (injected) user absent from the parameters


class TrainingDiverged(RuntimeError):
    def __init__(self, model: str, epoch: int):
        super().__init__(f"{model} training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Hyper:
    dim: int = 16
    learning_rate: float = 0.05
    l2_reg: float = 0.01
    epochs: int = 60
    neg_samples: int = 1

    @classmethod
    def from_dict(cls, obj: dict | None) -> Hyper:
        return cls(**(obj or {}))


@dataclass(frozen=True)
class TrainingSample:
    """One decomposed training sample.

    ``pair`` samples are ``(user, pos, neg)`` for non-sequential models;
    ``seq`` samples carry the history prefix that precedes ``pos``.
    """

    kind: str
    user: int
    pos: int
    neg: int
    prefix: tuple[int, ...] = ()

    @property
    def last(self) -> int:
        return self.prefix[-1] if self.prefix else -1


@dataclass
class Samples:
    """Column-oriented batch of training samples (``last`` = -1 when unused)."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    last: np.ndarray

    def __post_init__(self) -> None:
        for name in ("users", "pos", "neg", "last"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx) -> Samples:
        return Samples(self.users[idx], self.pos[idx], self.neg[idx], self.last[idx])

    @classmethod
    def empty(cls) -> Samples:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z)

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> Samples:
        return cls(
            [z.user for z in samples], [z.pos for z in samples], [z.neg for z in samples], [z.last for z in samples]
        )

    @classmethod
    def concat(cls, parts: Sequence[Samples]) -> Samples:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("users", "pos", "neg", "last")))


class Ranking(NamedTuple):
    items: np.ndarray
    truncated: bool


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending index."""
    return np.lexsort((np.arange(len(scores)), -scores))


def sample_negatives(users: np.ndarray, train_keys: np.ndarray, n_items: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one negative per entry of ``users`` uniformly outside that user's training items.

    ``train_keys`` is the sorted array of ``user * n_items + item`` keys of
    training interactions.
    """
    neg = rng.integers(0, n_items, size=len(users))
    bad = np.flatnonzero(np.isin(users * n_items + neg, train_keys))
    while len(bad):
        neg[bad] = rng.integers(0, n_items, size=len(bad))
        bad = bad[np.isin(users[bad] * n_items + neg[bad], train_keys)]
    return neg


def train_keys(train: Sequence[np.ndarray], n_items: int) -> np.ndarray:
    keys = [u * n_items + np.unique(seq) for u, seq in enumerate(train)]
    return np.sort(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def fold_in_user(A: np.ndarray, c: np.ndarray, reg: float, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Minimize ``sum_k softplus(-(A[k] @ p + c[k])) + reg/2 * len(A) * |p|^2`` over ``p`` by Newton's method.

    The objective is strictly convex for ``reg > 0``.
    """
    n, d = A.shape
    p = np.zeros(d)
    if n == 0:
        return p
    lam = reg * n
    for _ in range(max_iter):
        x = A @ p + c
        s_neg = _sigmoid(-x)
        g = -(A.T @ s_neg) + lam * p
        w = s_neg * (1.0 - s_neg)
        H = (A.T * w) @ A + lam * np.eye(d)
        step = np.linalg.solve(H, g)
        p -= step
        if np.abs(step).max() < tol:
            break
    return p


class RankingModel:
    """Parameter blocks plus canonical decomposed training samples.

    The flat parameter vector concatenates ``BLOCKS`` in order, each block
    raveled row-major (user block first, then item blocks by item index).
    Per-sample losses are ``softplus(-x) + reg/2 * |touched params|^2`` so
    that their sum is exactly the SGD training objective.
    """

    KIND: ClassVar[str] = ""
    BLOCKS: ClassVar[tuple[str, ...]] = ()
    SAMPLE_KIND: ClassVar[str] = ""

    def __init__(self, n_users: int, n_items: int, hyper: Hyper, seed: int, blocks: dict[str, np.ndarray],
                 samples: Samples | None = None):
        self.n_users = n_users
        self.n_items = n_items
        self.hyper = hyper
        self.seed = seed
        for name in self.BLOCKS:
            setattr(self, name, np.ascontiguousarray(blocks[name], dtype=np.float64))
        self.samples = samples if samples is not None else Samples.empty()
        self.history: dict = {}

    # -- parameters -------------------------------------------------------
    @property
    def param_dim(self) -> int:
        return sum(getattr(self, b).size for b in self.BLOCKS)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def params(self) -> np.ndarray:
        return np.concatenate([getattr(self, b).ravel() for b in self.BLOCKS])

    def _split(self, flat: np.ndarray) -> list[np.ndarray]:
        out, start = [], 0
        for b in self.BLOCKS:
            shape = getattr(self, b).shape
            size = int(np.prod(shape))
            out.append(np.ascontiguousarray(flat[start : start + size].reshape(shape)))
            start += size
        return out

    def with_params(self, flat: np.ndarray) -> RankingModel:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_dim,):
            raise ValueError(f"expected {self.param_dim} parameters, got {flat.shape}")
        return type(self)(self.n_users, self.n_items, self.hyper, self.seed,
                          dict(zip(self.BLOCKS, self._split(flat))), self.samples)

    def with_samples(self, samples: Samples) -> RankingModel:
        return type(self)(self.n_users, self.n_items, self.hyper, self.seed,
                          {b: getattr(self, b) for b in self.BLOCKS}, samples)

    def _zeros(self) -> list[np.ndarray]:
        return [np.zeros_like(getattr(self, b)) for b in self.BLOCKS]

    # -- kernels (subclass) ----------------------------------------------
    def _loss_grad_kernel(self, s: Samples, out: list[np.ndarray]) -> float:
        raise NotImplementedError

    def _hvp_kernel(self, s: Samples, v: list[np.ndarray], out: list[np.ndarray]) -> None:
        raise NotImplementedError

    def scores(self, u: int, history: Sequence[int] = (), user_vec: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def score_grad(self, u: int, history: Sequence[int], i: int) -> np.ndarray:
        raise NotImplementedError

    def _controlled_terms(self, s: Samples) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _controlled_grad_blocks(self, p: np.ndarray, s: Samples, out: list[np.ndarray]) -> None:
        raise NotImplementedError

    # -- contract ---------------------------------------------------------
    def score(self, u: int, history: Sequence[int], i: int) -> float:
        return float(self.scores(u, history)[i])

    def sum_loss_grad(self, s: Samples) -> tuple[float, np.ndarray]:
        """Summed per-sample loss and its flat gradient over ``s``."""
        out = self._zeros()
        loss = self._loss_grad_kernel(s, out)
        return loss, np.concatenate([o.ravel() for o in out])

    def loss(self, z: TrainingSample) -> float:
        return self.sum_loss_grad(Samples.from_samples([z]))[0]

    def grad(self, z: TrainingSample, user_vec: np.ndarray | None = None) -> np.ndarray:
        """Gradient of one sample's loss in the canonical flattening.

        For a controlled user (``z.user == CONTROLLED``) pass ``user_vec``; the
        controlled user's own embedding is not part of the parameter vector,
        so only the item blocks receive gradient.
        """
        if z.user == CONTROLLED:
            if user_vec is None:
                raise ValueError("controlled-user sample needs user_vec")
            return self.controlled_grad(user_vec, Samples.from_samples([z]))
        return self.sum_loss_grad(Samples.from_samples([z]))[1]

    def full_loss_grad(self) -> tuple[float, np.ndarray]:
        """Mean per-sample loss and gradient over the canonical training samples."""
        loss, g = self.sum_loss_grad(self.samples)
        n = max(self.n_samples, 1)
        return loss / n, g / n

    def hvp(self, v: np.ndarray, damping: float = 0.0, idx: np.ndarray | None = None) -> np.ndarray:
        """``(H + damping * I) v`` with ``H`` the mean per-sample loss Hessian.

        ``idx`` restricts the mean to a subset of the canonical samples (a
        stochastic Hessian estimate).
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.param_dim,):
            raise ValueError(f"vector has shape {v.shape}, expected ({self.param_dim},)")
        s = self.samples if idx is None else self.samples.take(idx)
        out = self._zeros()
        if len(s):
            self._hvp_kernel(s, self._split(v), out)
        hv = np.concatenate([o.ravel() for o in out]) / max(len(s), 1) + damping * v
        if not np.all(np.isfinite(hv)):
            raise FloatingPointError("non-finite Hessian-vector product")
        return hv

    def fold_in(self, s: Samples) -> np.ndarray:
        """Embedding of a controlled user that best explains its samples at fixed item parameters."""
        A, c = self._controlled_terms(s)
        return fold_in_user(A, c, self.hyper.l2_reg)

    def controlled_grad(self, user_vec: np.ndarray, s: Samples) -> np.ndarray:
        """Summed loss gradient of a controlled user's samples w.r.t. the item blocks."""
        out = self._zeros()
        if len(s):
            self._controlled_grad_blocks(np.asarray(user_vec, dtype=np.float64), s, out)
        return np.concatenate([o.ravel() for o in out])

    # -- ranking ------------------------------------------------------------
    def top_k(self, u: int, history: Sequence[int], k: int, exclude_history: bool = True) -> Ranking:
        return top_k(self, u, history, k, exclude_history)

    # -- checkpoints --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "kind": self.KIND,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "hyper": asdict(self.hyper),
            "seed": self.seed,
            "layout": [[b, list(getattr(self, b).shape)] for b in self.BLOCKS],
        }
        arrays = {b: getattr(self, b) for b in self.BLOCKS}
        arrays.update({f"samples_{f}": getattr(self.samples, f) for f in ("users", "pos", "neg", "last")})
        with Path(path).open("wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def top_k(model, u: int, history: Sequence[int], k: int, exclude_history: bool = True) -> Ranking:
    """Top-``k`` items by descending score, ties by ascending item index.

    When fewer than ``k`` items are eligible all of them are returned and the
    result is flagged ``truncated``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(model.scores(u, history), dtype=np.float64)
    order = rank_order(scores)
    if exclude_history and len(history):
        order = order[~np.isin(order, np.asarray(history, dtype=np.int64))]
    truncated = k > len(order)
    return Ranking(order[:k], truncated)


def load_model(path: str | Path) -> RankingModel:
    from . import MODEL_CLASSES

    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cls = MODEL_CLASSES[meta["kind"]]
        blocks = {b: z[b] for b in cls.BLOCKS}
        samples = Samples(*(z[f"samples_{f}"] for f in ("users", "pos", "neg", "last")))
    return cls(meta["n_users"], meta["n_items"], Hyper(**meta["hyper"]), meta["seed"], blocks, samples)


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    val_hit_rate: list[float] = field(default_factory=list)


def hit_rate(model, ds, k: int = 10, split: str = "val") -> float:
    """Leave-one-out HR@k over held-out users (history = training prefix)."""
    users = ds.heldout_users()
    if not len(users):
        return 0.0
    truth = ds.val if split == "val" else ds.test
    hits = 0
    for u in users:
        hist = ds.train[u] if split == "val" else np.append(ds.train[u], ds.val[u])
        hits += int(truth[u] in model.top_k(int(u), hist, k).items)
    return hits / len(users)


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 0.1 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


def fit_sgd(model: RankingModel, ds, positives: Samples, rng: np.random.Generator) -> RankingModel:
    """Run ``hyper.epochs`` shuffled SGD passes, resampling negatives each epoch.

    Afterwards one fixed negative per positive is drawn; those canonical
    samples define the training set seen by Hessian and influence code.
    """
    hyper = model.hyper
    if hyper.epochs < 0:
        raise ValueError("epochs must be >= 0")
    keys = train_keys(ds.train, ds.n_items)
    reps = max(int(hyper.neg_samples), 1)
    base = Samples.concat([positives] * reps)
    log = TrainLog()
    debug = logger.isEnabledFor(logging.DEBUG)
    for epoch in range(hyper.epochs):
        neg = sample_negatives(base.users, keys, ds.n_items, rng)
        perm = rng.permutation(len(base))
        batch = Samples(base.users[perm], base.pos[perm], neg[perm], base.last[perm])
        loss = model._sgd_epoch(batch, hyper.learning_rate, hyper.l2_reg)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(getattr(model, b))) for b in model.BLOCKS):
            raise TrainingDiverged(model.KIND, epoch)
        log.epochs.append(epoch)
        log.loss.append(loss / max(len(batch), 1))
        if debug:
            log.val_hit_rate.append(hit_rate(model, ds, 10, "val"))
            logger.debug("%s epoch %d loss %.5f val HR@10 %.4f", model.KIND, epoch, log.loss[-1], log.val_hit_rate[-1])
    neg = sample_negatives(positives.users, keys, ds.n_items, rng)
    model.samples = Samples(positives.users, positives.pos, neg, positives.last)
    model.history = {"loss": log.loss, "val_hit_rate": log.val_hit_rate}
    return model
