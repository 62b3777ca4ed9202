"""DQN training of the group-level poisoning policy and sequence generation."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..actionspace import ItemGroups, sample_item
from ..seeding import substream
from .qnet import PARAM_NAMES, QNetwork, q_values, select_action, sgd_step, td_loss_grad
from .replay import ReplayBuffer, Transition

logger = logging.getLogger(__name__)

# reward(items so far, actions so far) -> reward for the newest step
RewardFn = Callable[[Sequence[int], Sequence[int]], float]


@dataclass
class DqnConfig:
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    sync_every: int = 5  # epochs between target-network syncs
    capacity: int = 20_000
    batch_size: int = 64
    learning_rate: float = 0.01
    epochs: int = 200
    m_actions: int = 15
    users_per_epoch: int = 8
    updates_per_epoch: int = 8
    d_e: int = 16
    d_h: int = 32
    clip: float = 5.0
    top_share: float = 0.5  # batch share drawn from the top reward quartile
    reward_scale: float | str = "auto"  # "auto": 1 / std of rewards from a random pilot
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if self.sync_every < 1 or self.epochs < 1 or self.m_actions < 1 or self.capacity < 1:
            raise ValueError("sync_every, epochs, m_actions and capacity must be >= 1")
        if not 0.0 <= self.top_share <= 1.0:
            raise ValueError("top_share must lie in [0, 1]")
        if isinstance(self.reward_scale, str) and self.reward_scale != "auto":
            raise ValueError("reward_scale must be a number or 'auto'")

    @classmethod
    def from_dict(cls, obj: dict | None) -> DqnConfig:
        return cls(**(obj or {}))

    def epsilon(self, epoch: int) -> float:
        """Linear decay from ``eps_start`` at epoch 0 to ``eps_end`` at the last epoch."""
        if self.epochs == 1:
            return self.eps_end
        frac = min(max(epoch / (self.epochs - 1), 0.0), 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac


@dataclass
class Episode:
    items: list[int] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)  # chosen group ids (the agent state)
    groups: list[int] = field(default_factory=list)  # groups the items were drawn from
    fallbacks: list[bool] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)


def rollout(net: QNetwork, groups: ItemGroups, m_actions: int, epsilon: float, rng: np.random.Generator,
            reward: RewardFn | None = None) -> Episode:
    """One controlled user: ``m_actions`` group choices, each realized as an unused item."""
    ep = Episode()
    used: set[int] = set()
    n_items = sum(len(g) for g in groups.groups)
    for _ in range(m_actions):
        if len(used) >= n_items:
            break
        a = select_action(net, ep.actions, epsilon, rng)
        draw = sample_item(groups, a, used, rng)
        used.add(draw.item)
        ep.items.append(draw.item)
        ep.actions.append(a)
        ep.groups.append(draw.group)
        ep.fallbacks.append(draw.fallback)
        if reward is not None:
            ep.rewards.append(float(reward(ep.items, ep.actions)))
    return ep


@dataclass
class Generation:
    sequences: list[list[int]]
    actions: list[list[int]]
    groups: list[list[int]]
    fallbacks: list[list[bool]]

    @property
    def n_fallbacks(self) -> int:
        return sum(sum(f) for f in self.fallbacks)


def generate_poison_sequences(net: QNetwork, groups: ItemGroups, n_users: int, m_actions: int,
                              rng: np.random.Generator, greedy: bool = True, epsilon: float = 0.05) -> Generation:
    """Roll out one item sequence per controlled user (greedy, or epsilon-greedy with ``epsilon``)."""
    if m_actions < 1:
        raise ValueError("m_actions must be >= 1")
    eps = 0.0 if greedy else epsilon
    eps_list = [rollout(net, groups, m_actions, eps, rng) for _ in range(n_users)]
    return Generation([e.items for e in eps_list], [e.actions for e in eps_list],
                      [e.groups for e in eps_list], [e.fallbacks for e in eps_list])


@dataclass
class DqnLog:
    rows: list[dict] = field(default_factory=list)
    reward_scale: float = 1.0
    seconds: float = 0.0

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "epsilon", "mean_reward", "td_loss"])
            w.writeheader()
            w.writerows(self.rows)


def _auto_scale(net: QNetwork, groups: ItemGroups, cfg: DqnConfig, reward: RewardFn, rng) -> float:
    pilot = [r for _ in range(max(cfg.users_per_epoch, 4))
             for r in rollout(net, groups, cfg.m_actions, 1.0, rng, reward).rewards]
    std = float(np.std(pilot)) if pilot else 0.0
    return 1.0 / std if std > 0 and np.isfinite(std) else 1.0


def train_dqn(groups: ItemGroups, reward: RewardFn, cfg: DqnConfig | None = None,
              log_path: str | Path | None = None,
              callback: Callable[[int, QNetwork, QNetwork], None] | None = None) -> tuple[QNetwork, DqnLog]:
    """Alternate replay generation and Q-network updates.

    Each epoch rolls out ``users_per_epoch`` episodes (one per controlled
    user) under the current epsilon, stores every step as a transition, then
    takes ``updates_per_epoch`` clipped SGD steps on reward-balanced batches
    against ``r + gamma * max_a' Q_target(s', a')`` (``r`` alone at the end of
    an episode).  The target network copies the policy every ``sync_every``
    epochs.  ``callback(epoch, policy, target)`` runs at the end of every epoch.
    """
    cfg = cfg or DqnConfig()
    t0 = time.perf_counter()
    rng = substream(cfg.seed, "dqn")
    policy = QNetwork.init(groups.n_groups, cfg.d_e, cfg.d_h, substream(cfg.seed, "dqn/init"))
    target = policy.copy()
    if cfg.reward_scale == "auto":
        scale = _auto_scale(policy, groups, cfg, reward, substream(cfg.seed, "dqn/pilot"))
    else:
        scale = float(cfg.reward_scale)
    memory = ReplayBuffer(cfg.capacity)
    log = DqnLog(reward_scale=scale)
    for epoch in range(cfg.epochs):
        eps = cfg.epsilon(epoch)
        step_rewards = []
        for _ in range(cfg.users_per_epoch):
            ep = rollout(policy, groups, cfg.m_actions, eps, rng, reward)
            n = len(ep.actions)
            for t in range(n):
                r = scale * ep.rewards[t]
                step_rewards.append(ep.rewards[t])
                memory.push(Transition(tuple(ep.actions[:t]), ep.actions[t], r, tuple(ep.actions[: t + 1]),
                                       t == n - 1))
        losses = []
        for _ in range(cfg.updates_per_epoch):
            if not len(memory):
                break
            batch = memory.sample_balanced(cfg.batch_size, rng, cfg.top_share)
            y = np.array([b.reward for b in batch])
            live = [k for k, b in enumerate(batch) if not b.terminal]
            if live and cfg.gamma > 0:
                y[live] += cfg.gamma * q_values(target, [batch[k].next_state for k in live]).max(axis=1)
            loss, grad = td_loss_grad(policy, [b.state for b in batch], [b.action for b in batch], y)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite TD loss at epoch {epoch}")
            sgd_step(policy, grad, cfg.learning_rate, cfg.clip)
            losses.append(loss)
        if not policy.is_finite():
            raise FloatingPointError(f"non-finite Q-network parameters at epoch {epoch}")
        if (epoch + 1) % cfg.sync_every == 0:
            target = policy.copy()
        row = {
            "epoch": epoch,
            "epsilon": eps,
            "mean_reward": float(np.mean(step_rewards)) if step_rewards else 0.0,
            "td_loss": float(np.mean(losses)) if losses else float("nan"),
        }
        log.rows.append(row)
        if callback is not None:
            callback(epoch, policy, target)
        logger.debug("dqn epoch %(epoch)d eps %(epsilon).3f reward %(mean_reward).4g loss %(td_loss).4g", row)
    log.seconds = time.perf_counter() - t0
    if log_path is not None:
        log.write_csv(log_path)
    return policy, log


def save_agent(path: str | Path, net: QNetwork, cfg: DqnConfig, extra: dict | None = None) -> None:
    meta = {"format": "poisonforge.qnetwork", "version": 1, "config": asdict(cfg), **(extra or {})}
    with Path(path).open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **{n: a for n, a in zip(PARAM_NAMES, net.arrays())})


def load_agent(path: str | Path) -> tuple[QNetwork, DqnConfig, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        net = QNetwork(**{n: z[n].copy() for n in PARAM_NAMES})
    if meta.get("format") != "poisonforge.qnetwork":
        raise ValueError(f"{path} is not a Q-network checkpoint")
    return net, DqnConfig.from_dict(meta["config"]), meta
