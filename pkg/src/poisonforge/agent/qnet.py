"""Q-network: action embeddings, a GRU state encoder and a linear head, with analytic BPTT."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PARAM_NAMES = ("emb", "Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh", "Wo", "bo")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class QNetwork:
    """Row-vector GRU over group ids.

    ``z = sig(x Wz + h Uz + bz)``, ``r = sig(x Wr + h Ur + br)``,
    ``c = tanh(x Wh + (r*h) Uh + bh)``, ``h' = (1-z)*h + z*c``, and
    ``Q(s) = h_T Wo + bo`` with ``h_0 = 0``.
    """

    emb: np.ndarray
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    @classmethod
    def init(cls, n_actions: int, d_e: int = 16, d_h: int = 32, rng: np.random.Generator | None = None) -> QNetwork:
        rng = rng if rng is not None else np.random.default_rng(0)

        def glorot(a, b):
            lim = np.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b))

        return cls(
            emb=rng.normal(0.0, 0.1, size=(n_actions, d_e)),
            Wz=glorot(d_e, d_h), Uz=glorot(d_h, d_h), bz=np.zeros(d_h),
            Wr=glorot(d_e, d_h), Ur=glorot(d_h, d_h), br=np.zeros(d_h),
            Wh=glorot(d_e, d_h), Uh=glorot(d_h, d_h), bh=np.zeros(d_h),
            Wo=glorot(d_h, n_actions), bo=np.zeros(n_actions),
        )

    @classmethod
    def zeros(cls, n_actions: int, d_e: int, d_h: int) -> QNetwork:
        net = cls.init(n_actions, d_e, d_h)
        for name in PARAM_NAMES:
            getattr(net, name)[...] = 0.0
        return net

    @property
    def n_actions(self) -> int:
        return self.emb.shape[0]

    @property
    def d_h(self) -> int:
        return self.Uz.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> QNetwork:
        out, start = {}, 0
        for name, a in zip(PARAM_NAMES, self.arrays()):
            out[name] = np.array(flat[start : start + a.size], dtype=np.float64).reshape(a.shape)
            start += a.size
        return QNetwork(**out)

    def copy(self) -> QNetwork:
        return QNetwork(**{n: a.copy() for n, a in zip(PARAM_NAMES, self.arrays())})

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def _pad(states: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in states], dtype=np.int64)
    T = int(lengths.max()) if len(lengths) else 0
    A = np.zeros((len(states), T), dtype=np.int64)
    for b, s in enumerate(states):
        A[b, : len(s)] = s
    return A, lengths


def _forward(net: QNetwork, states: Sequence[Sequence[int]]):
    A, lengths = _pad(states)
    B, T = A.shape
    h = np.zeros((B, net.d_h))
    cache = []
    for t in range(T):
        m = (t < lengths)[:, None].astype(np.float64)
        x = net.emb[A[:, t]]
        z = _sigmoid(x @ net.Wz + h @ net.Uz + net.bz)
        r = _sigmoid(x @ net.Wr + h @ net.Ur + net.br)
        c = np.tanh(x @ net.Wh + (r * h) @ net.Uh + net.bh)
        h_new = (1.0 - z) * h + z * c
        cache.append((m, x, h, z, r, c))
        h = m * h_new + (1.0 - m) * h
    return h @ net.Wo + net.bo, (A, h, cache)


def q_values(net: QNetwork, states: Sequence[Sequence[int]]) -> np.ndarray:
    """Action values for a batch of states (rows), each a list of group ids."""
    if not len(states):
        return np.zeros((0, net.n_actions))
    return _forward(net, states)[0]


def q_forward(net: QNetwork, state: Sequence[int]) -> np.ndarray:
    return q_values(net, [state])[0]


def _backward(net: QNetwork, dQ: np.ndarray, aux) -> QNetwork:
    A, h_T, cache = aux
    g = QNetwork.zeros(net.n_actions, net.emb.shape[1], net.d_h)
    g.Wo += h_T.T @ dQ
    g.bo += dQ.sum(axis=0)
    dh = dQ @ net.Wo.T
    for t in range(len(cache) - 1, -1, -1):
        m, x, h, z, r, c = cache[t]
        dn = dh * m
        dprev = dh * (1.0 - m) + dn * (1.0 - z)
        dz = dn * (c - h) * z * (1.0 - z)
        dc = dn * z * (1.0 - c * c)
        g.Wh += x.T @ dc
        g.Uh += (r * h).T @ dc
        g.bh += dc.sum(axis=0)
        drh = dc @ net.Uh.T
        dr = drh * h * r * (1.0 - r)
        dprev += drh * r
        g.Wz += x.T @ dz
        g.Uz += h.T @ dz
        g.bz += dz.sum(axis=0)
        g.Wr += x.T @ dr
        g.Ur += h.T @ dr
        g.br += dr.sum(axis=0)
        dprev += dz @ net.Uz.T + dr @ net.Ur.T
        dx = dc @ net.Wh.T + dz @ net.Wz.T + dr @ net.Wr.T
        np.add.at(g.emb, A[:, t], dx * m)
        dh = dprev
    return g


def td_loss_grad(net: QNetwork, states: Sequence[Sequence[int]], actions: Sequence[int],
                 targets: np.ndarray) -> tuple[float, QNetwork]:
    """Mean of ``(target - Q(s, a))^2`` over the batch and its gradient (targets held constant)."""
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    B = len(actions)
    Q, aux = _forward(net, states)
    err = targets - Q[np.arange(B), actions]
    dQ = np.zeros_like(Q)
    dQ[np.arange(B), actions] = -2.0 * err / B
    return float(np.mean(err**2)), _backward(net, dQ, aux)


def q_backward(net: QNetwork, state: Sequence[int], action: int, td_target: float) -> np.ndarray:
    """Flat gradient of ``(td_target - Q(state, action))^2``."""
    return td_loss_grad(net, [state], [action], np.array([td_target]))[1].flat()


def sgd_step(net: QNetwork, grad: QNetwork, lr: float, clip: float = 5.0) -> float:
    """In-place clipped SGD step; returns the pre-clipping gradient norm."""
    norm = float(np.sqrt(sum((a * a).sum() for a in grad.arrays())))
    factor = lr * (clip / norm if clip and norm > clip else 1.0)
    for p, d in zip(net.arrays(), grad.arrays()):
        p -= factor * d
    return norm


def select_action(net: QNetwork, state: Sequence[int], epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; greedy ties go to the lowest group id."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(q_forward(net, state)))
