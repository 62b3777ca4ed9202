"""Replay memory with reward-balanced batch sampling."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    state: tuple[int, ...]
    action: int
    reward: float
    next_state: tuple[int, ...]
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity memory; once full, the oldest transition is evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self):
        return iter(self._data)

    def push(self, t: Transition) -> None:
        self._data.append(t)

    def sample_uniform(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(0, len(self._data), size=n)
        return [self._data[i] for i in idx]

    def sample_balanced(self, n: int, rng: np.random.Generator, top_share: float = 0.5) -> list[Transition]:
        """``top_share`` of the batch from the top reward quartile, the rest uniformly (with replacement)."""
        if not self._data:
            raise ValueError("replay memory is empty")
        rewards = np.array([t.reward for t in self._data])
        n_top = max(1, int(np.ceil(len(rewards) / 4)))
        top = np.argsort(-rewards, kind="stable")[:n_top]
        k = int(round(n * top_share))
        idx = np.concatenate([rng.choice(top, size=k), rng.integers(0, len(rewards), size=n - k)])
        return [self._data[i] for i in idx]
