"""Client-side local training and model evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset, minibatch_iter
from .errors import ArgumentError, DimensionError, StateError
from .numerics import EPS, LossSpec, backward, sgd_step
from .zoo import HeterogeneousModel


@dataclass(frozen=True)
class LocalTrainConfig:
    steps: int
    batch_size: int
    lr: float

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ArgumentError("steps and batch_size must be >= 1")
        if self.lr < 0:
            raise ArgumentError("learning rate must be nonnegative")


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    mean_loss: float


def local_train(model: HeterogeneousModel, shard: Dataset, cfg: LocalTrainConfig,
                rng: np.random.Generator) -> HeterogeneousModel:
    """``cfg.steps`` mini-batch SGD steps on cross-entropy at a constant rate.

    Works on a copy; ``model`` is left untouched.
    """
    if len(shard) == 0:
        raise StateError("client shard is empty")
    if shard.dim != model.backbone[0].in_dim:
        raise DimensionError(f"shard has {shard.dim} features, model expects {model.backbone[0].in_dim}")
    trained = model.copy()
    layers = trained.layers
    batches = minibatch_iter(shard, cfg.batch_size, rng)
    for _ in range(cfg.steps):
        idx = next(batches)
        grads = backward(layers, shard.features[idx], LossSpec.cross_entropy(shard.labels[idx]))
        sgd_step(layers, grads, cfg.lr)
    return trained


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the tie rule used everywhere.
    return np.argmax(probs, axis=-1)


def evaluate(model: HeterogeneousModel, data: Dataset) -> EvalResult:
    if len(data) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    probs = model.predict_proba(data.features)
    if np.any(data.labels < 0) or np.any(data.labels >= probs.shape[1]):
        raise ArgumentError("labels outside the model's class range")
    correct = argmax_lowest(probs) == data.labels
    picked = probs[np.arange(len(data)), data.labels]
    loss = -np.log(np.maximum(picked, EPS))
    return EvalResult(accuracy=float(correct.mean()), mean_loss=float(loss.mean()))
