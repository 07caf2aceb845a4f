"""Server side of ensemble transfer.

Per public input the server

1. weighs each returned client model by the variance of its class
   probabilities (a peaked output counts as confident),
2. forms the weighted consensus and its argmax pseudo-label,
3. collects the clients whose own argmax disagrees with that label and mixes
   their outputs into a diversity target,

then trains the large model on ``CE(pseudo-label) + lam * KL(diversity target
|| server output)``. Afterwards small models of equal architecture are
averaged and every small model receives a copy of the server head.

Per-sample functions take a *bundle*: a mapping ``client_id -> probability
vector``. :func:`consensus_targets` is the batched form used in training
and must agree with the per-sample path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .datasets import PublicSet
from .errors import ArgumentError, ConfigurationError, DimensionError
from .numerics import DenseLayer, LossSpec, backward, loss_value, sgd_step
from .zoo import Head, HeterogeneousModel, ModelRegistry, set_head

ZERO_VARIANCE = 1e-15


def logit_variance(s) -> float:
    """Population variance of the N probability values."""
    s = np.asarray(s, dtype=np.float64)
    return float(np.mean((s - 1.0 / s.size) ** 2))


def consensus_weights(bundle: Mapping[int, np.ndarray]) -> dict[int, float]:
    if not bundle:
        raise ArgumentError("empty bundle")
    ids = sorted(bundle)
    var = {k: logit_variance(bundle[k]) for k in ids}
    total = 0.0
    for k in ids:
        total += var[k]
    if total < ZERO_VARIANCE:
        return {k: 1.0 / len(ids) for k in ids}
    return {k: var[k] / total for k in ids}


def weighted_consensus(bundle: Mapping[int, np.ndarray], weights: Mapping[int, float]) -> np.ndarray:
    ids = sorted(bundle)
    if abs(sum(weights[k] for k in ids) - 1.0) > 1e-9:
        raise ArgumentError("consensus weights must sum to 1")
    out = np.zeros_like(np.asarray(bundle[ids[0]], dtype=np.float64))
    for k in ids:
        out += weights[k] * np.asarray(bundle[k], dtype=np.float64)
    return out


def consensus_label(consensus) -> int:
    return int(np.argmax(consensus))


def diversity_set(bundle: Mapping[int, np.ndarray], label: int) -> set[int]:
    return {k for k, s in bundle.items() if int(np.argmax(s)) != label}


def diversity_target(bundle: Mapping[int, np.ndarray], members: set[int],
                     weights: Mapping[int, float] | None = None,
                     renormalize: bool = True) -> np.ndarray | None:
    """Mix of the disagreeing clients' outputs, or ``None`` if nobody disagrees.

    ``weights`` are the confidence weights normalised over the whole bundle.
    With ``renormalize`` the mix is scaled back onto the simplex; if the
    disagreeing clients carry zero total weight the target is ``None``.
    """
    if not members:
        return None
    if weights is None:
        weights = consensus_weights(bundle)
    ids = sorted(members)
    raw = np.zeros_like(np.asarray(bundle[ids[0]], dtype=np.float64))
    for k in ids:
        raw += weights[k] * np.asarray(bundle[k], dtype=np.float64)
    if not renormalize:
        return raw
    mass = raw.sum()
    return raw / mass if mass > 0 else None


@dataclass
class ConsensusResult:
    weights: dict[int, float]
    consensus: np.ndarray
    label: int
    diversity_set: set[int]
    diversity_target: np.ndarray | None


def consensus(bundle: Mapping[int, np.ndarray], renormalize: bool = True) -> ConsensusResult:
    weights = consensus_weights(bundle)
    mix = weighted_consensus(bundle, weights)
    label = consensus_label(mix)
    members = diversity_set(bundle, label)
    return ConsensusResult(weights, mix, label, members,
                           diversity_target(bundle, members, weights, renormalize))


@dataclass
class ConsensusTargets:
    """Frozen distillation targets for every public input."""

    labels: np.ndarray  # (P,)
    targets: np.ndarray  # (P, N); rows where mask is False are unused
    mask: np.ndarray  # (P,) bool

    def __len__(self) -> int:
        return self.labels.shape[0]

    def spec(self, index, lam: float) -> LossSpec:
        return LossSpec.composite(self.labels[index], self.targets[index], lam, self.mask[index])


def client_outputs(models: Mapping[int, HeterogeneousModel], inputs: np.ndarray) -> np.ndarray:
    """Stack of probabilities, shape ``(clients, P, N)``, clients in ascending id."""
    return np.stack([models[k].predict_proba(inputs) for k in sorted(models)])


def consensus_targets(probs: np.ndarray, renormalize: bool = True) -> ConsensusTargets:
    """Batched consensus over a ``(clients, P, N)`` stack (clients in ascending id)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] == 0:
        raise DimensionError("expected a non-empty (clients, P, N) stack")
    n_clients, n_rows, n_classes = probs.shape
    var = np.mean((probs - 1.0 / n_classes) ** 2, axis=2)  # (clients, P)
    total = np.zeros(n_rows)
    for k in range(n_clients):
        total += var[k]
    flat = total < ZERO_VARIANCE
    weights = np.where(flat, 1.0 / n_clients, var / np.where(flat, 1.0, total))

    mix = np.zeros((n_rows, n_classes))
    for k in range(n_clients):
        mix += weights[k][:, None] * probs[k]
    labels = np.argmax(mix, axis=1)

    disagree = np.argmax(probs, axis=2) != labels  # (clients, P)
    raw = np.zeros((n_rows, n_classes))
    for k in range(n_clients):
        raw += np.where(disagree[k], weights[k], 0.0)[:, None] * probs[k]
    mask = disagree.any(axis=0)
    if renormalize:
        mass = raw.sum(axis=1)
        mask &= mass > 0
        raw = np.where(mask[:, None], raw / np.where(mass > 0, mass, 1.0)[:, None], 0.0)
    return ConsensusTargets(labels=labels, targets=raw, mask=mask)


def ensemble_loss(server: HeterogeneousModel, inputs: np.ndarray, targets: ConsensusTargets,
                  lam: float) -> float:
    """Batch mean of ``CE(server(x), y_s) + lam * KL(s_div || server(x))``."""
    if lam < 0:
        raise ArgumentError("lambda must be nonnegative")
    return loss_value(server.layers, inputs, targets.spec(slice(None), lam))


def server_update(server: HeterogeneousModel, public: PublicSet, targets: ConsensusTargets,
                  steps: int, batch_size: int, lr: float, lam: float,
                  rng: np.random.Generator) -> HeterogeneousModel:
    """SGD on the ensemble loss; each step samples a batch without replacement.

    Returns an updated copy; targets stay fixed throughout.
    """
    if len(public) < batch_size:
        raise ConfigurationError(f"public set has {len(public)} rows, batch needs {batch_size}")
    if len(targets) != len(public):
        raise DimensionError("one consensus target per public input is required")
    updated = server.copy()
    layers = updated.layers
    for _ in range(steps):
        idx = rng.choice(len(public), size=batch_size, replace=False)
        grads = backward(layers, public.inputs[idx], targets.spec(idx, lam))
        sgd_step(layers, grads, lr)
    return updated


def _mean_layers(stacks: Sequence[Sequence[DenseLayer]]) -> list[DenseLayer]:
    first = stacks[0]
    for other in stacks[1:]:
        if len(other) != len(first) or any(
            a.weights.shape != b.weights.shape or a.activation != b.activation
            for a, b in zip(first, other)
        ):
            raise DimensionError("cannot average models of different shapes")
    # Mean as first + average offset, so identical inputs reproduce the input bit for bit.
    out = []
    n = len(stacks)
    for j, layer in enumerate(first):
        dw = np.zeros_like(layer.weights)
        db = np.zeros_like(layer.bias)
        for other in stacks[1:]:
            dw += other[j].weights - layer.weights
            db += other[j].bias - layer.bias
        out.append(DenseLayer(layer.weights + dw / n, layer.bias + db / n, layer.activation))
    return out


def average_models(models: Sequence[HeterogeneousModel]) -> HeterogeneousModel:
    """Unweighted parameter mean, summed in the order given."""
    if not models:
        raise ArgumentError("nothing to average")
    layers = _mean_layers([m.layers for m in models])
    n_backbone = len(models[0].backbone)
    return HeterogeneousModel(layers[:n_backbone], Head(layers[n_backbone:]))


def aggregate_same_arch(groups: Mapping[int, Sequence[HeterogeneousModel]],
                        previous: Mapping[int, HeterogeneousModel]) -> dict[int, HeterogeneousModel]:
    """Average each model id's returned copies; ids nobody used keep ``previous``.

    Each group must already be in ascending client-id order.
    """
    out = {}
    for i in sorted(previous):
        group = groups.get(i, ())
        out[i] = average_models(group) if group else previous[i].copy()
    return out


def average_client_heads(models: Sequence[HeterogeneousModel]) -> Head:
    if not models:
        raise ArgumentError("need at least one client model")
    return Head(_mean_layers([m.head.layers for m in models]))


def broadcast_server_head(server: HeterogeneousModel, registry: ModelRegistry) -> None:
    for i in sorted(registry.small_models):
        set_head(registry.small_models[i], server.head)
