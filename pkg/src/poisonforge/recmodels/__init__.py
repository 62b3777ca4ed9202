"""BPRMF and FPMC victim/simulator recommenders behind one differentiable contract."""
from .base import (
    CONTROLLED,
    Hyper,
    Ranking,
    RankingModel,
    Samples,
    TrainingDiverged,
    TrainingSample,
    hit_rate,
    load_model,
    rank_order,
    top_k,
)
from .bprmf import BPRMF, train_bprmf
from .fpmc import FPMC, train_fpmc

MODEL_CLASSES = {"bprmf": BPRMF, "fpmc": FPMC}
TRAINERS = {"bprmf": train_bprmf, "fpmc": train_fpmc}


def train_model(kind: str, ds, hyper: Hyper | None = None, seed: int = 0) -> RankingModel:
    try:
        trainer = TRAINERS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(TRAINERS)}") from None
    return trainer(ds, hyper, seed)


def per_sample_loss_grad(model: RankingModel, z: TrainingSample, user_vec=None):
    return model.grad(z, user_vec)


def hvp(model: RankingModel, v, damping: float = 0.0):
    return model.hvp(v, damping)


__all__ = [
    "BPRMF", "CONTROLLED", "FPMC", "Hyper", "MODEL_CLASSES", "Ranking", "RankingModel", "Samples",
    "TrainingDiverged", "TrainingSample", "hit_rate", "hvp", "load_model", "per_sample_loss_grad",
    "rank_order", "top_k", "train_bprmf", "train_fpmc", "train_model",
]
