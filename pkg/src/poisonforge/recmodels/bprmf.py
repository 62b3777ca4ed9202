"""Matrix factorization trained with the BPR pairwise ranking loss."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import kernels
from .base import Hyper, RankingModel, Samples, _sigmoid, fit_sgd, init_uniform


class BPRMF(RankingModel):
    """``score(u, i) = P[u] . Q[i] + b[i]``; history is ignored.

    Flat layout: ``P`` (users x d), ``Q`` (items x d), ``b`` (items).
    """

    KIND = "bprmf"
    BLOCKS = ("P", "Q", "b")
    SAMPLE_KIND = "pair"

    def _loss_grad_kernel(self, s, out):
        return kernels.bpr_loss_grad(self.P, self.Q, self.b, s.users, s.pos, s.neg, self.hyper.l2_reg, *out)

    def _hvp_kernel(self, s, v, out):
        kernels.bpr_hvp(self.P, self.Q, self.b, s.users, s.pos, s.neg, self.hyper.l2_reg, *v, *out)

    def _sgd_epoch(self, s: Samples, lr: float, reg: float) -> float:
        return kernels.bpr_sgd_epoch(self.P, self.Q, self.b, s.users, s.pos, s.neg, lr, reg)

    def scores(self, u: int, history: Sequence[int] = (), user_vec: np.ndarray | None = None) -> np.ndarray:
        p = self.P[u] if user_vec is None else user_vec
        return self.Q @ p + self.b

    def score_grad(self, u: int, history: Sequence[int], i: int) -> np.ndarray:
        gP, gQ, gb = self._zeros()
        gP[u] = self.Q[i]
        gQ[i] = self.P[u]
        gb[i] = 1.0
        return np.concatenate([gP.ravel(), gQ.ravel(), gb])

    def _controlled_terms(self, s):
        return self.Q[s.pos] - self.Q[s.neg], self.b[s.pos] - self.b[s.neg]

    def _controlled_grad_blocks(self, p, s, out):
        _, gQ, gb = out
        reg = self.hyper.l2_reg
        A, c = self._controlled_terms(s)
        g = -_sigmoid(-(A @ p + c))
        np.add.at(gQ, s.pos, g[:, None] * p + reg * self.Q[s.pos])
        np.add.at(gQ, s.neg, -g[:, None] * p + reg * self.Q[s.neg])
        np.add.at(gb, s.pos, g + reg * self.b[s.pos])
        np.add.at(gb, s.neg, -g + reg * self.b[s.neg])

    @staticmethod
    def decompose(seq: Sequence[int], user: int) -> Samples:
        """One ``(user, item)`` pair per interaction; negatives left as -1."""
        seq = np.asarray(seq, dtype=np.int64)
        n = len(seq)
        return Samples(np.full(n, user), seq, np.full(n, -1), np.full(n, -1))


def train_bprmf(ds, hyper: Hyper | None = None, seed: int = 0) -> BPRMF:
    """Fit BPRMF by seeded SGD with one uniform negative per positive, resampled every epoch."""
    hyper = hyper or Hyper()
    if hyper.dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    d = hyper.dim
    model = BPRMF(
        ds.n_users,
        ds.n_items,
        hyper,
        seed,
        {
            "P": init_uniform(rng, (ds.n_users, d)),
            "Q": init_uniform(rng, (ds.n_items, d)),
            "b": np.zeros(ds.n_items),
        },
    )
    positives = Samples.concat([BPRMF.decompose(seq, u) for u, seq in enumerate(ds.train)])
    return fit_sgd(model, ds, positives, rng)
