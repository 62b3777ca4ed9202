"""Group-level poisoning agent: GRU Q-network, replay memory and DQN training."""
from .dqn import (
    DqnConfig,
    DqnLog,
    Episode,
    Generation,
    generate_poison_sequences,
    load_agent,
    rollout,
    save_agent,
    train_dqn,
)
from .qnet import PARAM_NAMES, QNetwork, q_backward, q_forward, q_values, select_action, sgd_step, td_loss_grad
from .replay import ReplayBuffer, Transition

__all__ = [
    "DqnConfig", "DqnLog", "Episode", "Generation", "generate_poison_sequences", "load_agent", "rollout",
    "save_agent", "train_dqn", "PARAM_NAMES", "QNetwork", "q_backward", "q_forward", "q_values",
    "select_action", "sgd_step", "td_loss_grad", "ReplayBuffer", "Transition",
]
