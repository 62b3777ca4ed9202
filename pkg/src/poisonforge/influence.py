"""First-order influence of injected samples on target prediction scores.

Injecting a sample ``z`` with weight ``eps`` moves the parameters by roughly
``-eps * H^-1 grad L(z)`` and a target score ``f`` by
``-eps * grad f . H^-1 grad L(z)``.  Inverse-Hessian-vector products come from
the stochastic LiSSA recursion, so the Hessian is never formed.

Controlled users are new accounts whose embeddings are not part of the
trained parameters.  Their embedding is folded in: it is set to the
minimizer of their own samples' loss at the trained item parameters, which is
the value it takes at any positive injection weight.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, TargetSpec
from .recmodels import CONTROLLED, RankingModel, Samples, TrainingSample
from .seeding import substream
from .simulator import Ensemble

logger = logging.getLogger(__name__)


class LissaDiverged(FloatingPointError):
    pass


@dataclass
class LissaConfig:
    depth: int = 1000
    scale: float | str = 10.0  # "auto": power-iteration bound on the top eigenvalue
    repeats: int = 4
    damping: float = 0.01
    batch: int = 16  # <= 0 uses every training sample (deterministic recursion)
    seed: int = 0

    def __post_init__(self) -> None:
        bad_scale = self.scale != "auto" if isinstance(self.scale, str) else self.scale <= 0
        if self.depth < 1 or bad_scale or self.repeats < 1 or self.damping < 0:
            raise ValueError(f"invalid LiSSA configuration {self}")

    def resolve_scale(self, model) -> float:
        if self.scale == "auto":
            return lissa_scale(model, self.damping, seed=self.seed)
        return float(self.scale)

    @classmethod
    def from_dict(cls, obj: dict | None) -> LissaConfig:
        return cls(**(obj or {}))


@dataclass(frozen=True)
class TargetSample:
    user: int
    item: int
    history: tuple[int, ...]


def target_samples(ds: Dataset, spec: TargetSpec) -> list[TargetSample]:
    """All (target user, target item) pairs, scored on the user's training history."""
    return [
        TargetSample(u, i, tuple(int(x) for x in ds.train[u]))
        for u in spec.target_users
        for i in spec.target_items
    ]


def inverse_hvp(model, v: np.ndarray, cfg: LissaConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Approximate ``(H + damping I)^-1 v``.

    Runs ``r <- v + (I - (H_batch + damping I) / scale) r`` for ``depth``
    steps, ``repeats`` times, and returns the average of ``r / scale``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.param_dim,):
        raise ValueError(f"vector has shape {v.shape}, expected ({model.param_dim},)")
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return np.zeros_like(v)
    rng = rng if rng is not None else substream(cfg.seed, "lissa")
    n = model.n_samples
    full = cfg.batch <= 0 or cfg.batch >= n
    scale = cfg.resolve_scale(model)
    limit = 1e6 * vnorm
    acc = np.zeros_like(v)
    for _ in range(cfg.repeats):
        r = v.copy()
        for _ in range(cfg.depth):
            idx = None if full else rng.integers(0, n, size=cfg.batch)
            r = v + r - model.hvp(r, cfg.damping, idx) / scale
            if not np.isfinite(r).all() or np.linalg.norm(r) > limit:
                raise LissaDiverged("LiSSA diverged; increase scale/damping")
        acc += r / scale
    return acc / cfg.repeats


def lissa_scale(model, damping: float = 0.0, iters: int = 100, seed: int = 0, margin: float = 1.05) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``H + damping I``, times ``margin``.

    A scale at or above this keeps the deterministic recursion contractive.
    """
    x = substream(seed, "power").normal(size=model.param_dim)
    lam = 0.0
    for _ in range(iters):
        y = model.hvp(x, damping)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return margin * max(damping, 1e-12)
        x = y / lam
    return margin * lam


def score_influence(model, z_delta: TrainingSample, t: TargetSample, cfg: LissaConfig,
                    user_vec: np.ndarray | None = None, rng: np.random.Generator | None = None) -> float:
    """``-grad f_test(t) . (H + damping I)^-1 grad L(z_delta)`` per unit of injection weight."""
    g = model.grad(z_delta, user_vec)
    if not np.any(g):
        return 0.0
    f = model.score_grad(t.user, t.history, t.item)
    if not np.any(f):
        return 0.0
    return -float(f @ inverse_hvp(model, g, cfg, rng))


def _negative_table(n_items: int, horizon: int, seed: int, width: int = 16) -> np.ndarray:
    return substream(seed, "influence/negatives").integers(0, n_items, size=(horizon, width))


class InfluenceEstimator:
    """Ensemble influence of controlled-user sequences on the target scores.

    For each member the inverse-Hessian product of the target-gradient
    average is computed once, ``s_m = (H_m + damping I)^-1 mean_t grad f_t``.
    Afterwards the influence of any injected sequence costs one fold-in and
    one gradient dot product per member:
    ``value = sum_m w_m * (-s_m . sum_z grad L_m(z)) / sum_m w_m``.

    With ``normalize=True`` each member's influence is divided by its RMS
    over a fixed pilot of random catalog sequences before weighting, so the
    weights compare members on a common scale instead of on whatever units
    their parameterizations happen to produce.
    """

    def __init__(self, ens: Ensemble, ds: Dataset, targets: TargetSpec, cfg: LissaConfig | None = None,
                 seed: int = 0, max_len: int = 64, normalize: bool = False, pilot_size: int = 64):
        self.ens = ens
        self.cfg = cfg or LissaConfig()
        self.seed = seed
        self.targets = target_samples(ds, targets)
        if not self.targets:
            raise ValueError("empty target set")
        self.n_items = ds.n_items
        self._neg = _negative_table(ds.n_items, max_len, seed)
        self.target_grads: list[np.ndarray] = []
        self.cache: list[np.ndarray] = []
        for m, model in enumerate(ens.members):
            gbar = np.mean([model.score_grad(t.user, t.history, t.item) for t in self.targets], axis=0)
            self.target_grads.append(gbar)
            rng = substream(seed, f"lissa/member{m}")
            self.cache.append(inverse_hvp(model, gbar, self.cfg, rng))
        self.member_scale = np.ones(ens.size)
        if normalize:
            self.member_scale = self._pilot_scale(pilot_size, max_len)

    def _pilot_scale(self, n: int, length: int) -> np.ndarray:
        rng = substream(self.seed, "influence/pilot")
        length = min(length, self.n_items)
        vals = np.array([self.member_values(rng.choice(self.n_items, length, replace=False)) for _ in range(n)])
        rms = np.sqrt(np.mean(vals**2, axis=0))
        return np.where(rms > 0, rms, 1.0)

    # -- decomposition ------------------------------------------------------
    def negatives(self, seq: Sequence[int]) -> np.ndarray:
        """Deterministic negative for each position of ``seq``, avoiding the sequence's items."""
        if len(seq) > len(self._neg):
            extra = substream(self.seed, f"influence/negatives/{len(seq)}").integers(
                0, self.n_items, size=(len(seq) - len(self._neg), self._neg.shape[1]))
            self._neg = np.vstack([self._neg, extra])
        used = set(int(x) for x in seq)
        out = np.empty(len(seq), dtype=np.int64)
        for t in range(len(seq)):
            for cand in self._neg[t]:
                if int(cand) not in used:
                    out[t] = cand
                    break
            else:
                free = np.setdiff1d(np.arange(self.n_items), np.fromiter(used, dtype=np.int64))
                out[t] = free[t % len(free)]
        return out

    def decompose(self, model: RankingModel, seq: Sequence[int]) -> Samples:
        seq = np.asarray(seq, dtype=np.int64)
        base = type(model).decompose(seq, CONTROLLED)
        neg = self.negatives(seq)
        # pair samples sit at positions 0..n-1, prefix samples at 1..n-1
        offset = len(seq) - len(base)
        base.neg = np.ascontiguousarray(neg[offset:])
        return base

    def training_samples(self, model: RankingModel, seq: Sequence[int]) -> list[TrainingSample]:
        s = self.decompose(model, seq)
        seq = [int(x) for x in seq]
        off = len(seq) - len(s)
        return [
            TrainingSample(model.SAMPLE_KIND, CONTROLLED, int(s.pos[k]), int(s.neg[k]),
                           tuple(seq[: k + off]) if model.SAMPLE_KIND == "seq" else ())
            for k in range(len(s))
        ]

    # -- evaluation -----------------------------------------------------------
    def member_gradients(self, seq: Sequence[int]) -> list[np.ndarray]:
        """Summed loss gradient of one controlled user's samples, per member."""
        out = []
        for model in self.ens.members:
            s = self.decompose(model, seq)
            if not len(s):
                out.append(np.zeros(model.param_dim))
                continue
            p = model.fold_in(s)
            out.append(model.controlled_grad(p, s))
        return out

    def member_values(self, seq: Sequence[int]) -> np.ndarray:
        """Per-member influence of one sequence (divided by the member scales when normalizing)."""
        raw = np.array([-float(c @ g) for c, g in zip(self.cache, self.member_gradients(seq))])
        return raw / self.member_scale

    def value(self, seqs: Iterable[Sequence[int]]) -> float:
        w = np.asarray(self.ens.weights)
        total = 0.0
        for seq in seqs:
            if len(seq):
                total += float(w @ self.member_values(seq))
        return total / float(w.sum())

    def diagnostics(self, seqs: Sequence[Sequence[int]]) -> list[dict]:
        """Per-member, per-target influence of the injected sequences (uses fresh LiSSA solves)."""
        rows = []
        for m, model in enumerate(self.ens.members):
            g = np.zeros(model.param_dim)
            for seq in seqs:
                if len(seq):
                    g += self.member_gradients(seq)[m]
            ihvp = inverse_hvp(model, g, self.cfg, substream(self.seed, f"lissa/diag{m}"))
            for t in self.targets:
                rows.append({
                    "member": m,
                    "model": model.KIND,
                    "weight": self.ens.weights[m],
                    "target_user": t.user,
                    "target_item": t.item,
                    "influence": -float(model.score_grad(t.user, t.history, t.item) @ ihvp),
                })
        return rows


def sequence_influence(ens: Ensemble, ds: Dataset, seqs: Sequence[Sequence[int]], targets: TargetSpec,
                       cfg: LissaConfig | None = None, seed: int = 0) -> float:
    """Weighted ensemble average over targets of the summed per-sample score influence."""
    return InfluenceEstimator(ens, ds, targets, cfg, seed).value(seqs)


def write_diagnostics_csv(rows: Sequence[dict], path: str | Path) -> None:
    fields = ["member", "model", "weight", "target_user", "target_item", "influence"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


class InfluenceReward:
    """Per-step agent reward: the increase in estimated influence from appending the newest item.

    Rewards telescope, so an episode's rewards sum to the influence of the
    full generated sequence.
    """

    def __init__(self, estimator: InfluenceEstimator, scale: float = 1.0, memo_size: int = 50_000):
        self.estimator = estimator
        self.scale = scale
        self._memo: dict[tuple[int, ...], float] = {}
        self._memo_size = memo_size

    def value(self, items: Sequence[int]) -> float:
        key = tuple(int(x) for x in items)
        if not key:
            return 0.0
        hit = self._memo.get(key)
        if hit is None:
            if len(self._memo) >= self._memo_size:
                self._memo.clear()
            hit = self._memo[key] = self.estimator.value([key])
        return hit

    def __call__(self, items: Sequence[int], actions: Sequence[int] = ()) -> float:
        return self.scale * (self.value(items) - self.value(items[:-1]))
