"""Dense feed-forward engine: forward pass, losses, exact gradients and SGD.

Every model in the simulator is a list of :class:`DenseLayer` objects whose
final output goes through a softmax, so ``forward`` always returns points on
the probability simplex. Arrays are float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArgumentError, DimensionError

EPS = 1e-12
ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("weights must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} != out dimension {self.weights.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> DenseLayer:
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class LossGrad:
    """Loss value plus one ``(d_weights, d_bias)`` pair per layer."""

    value: float
    grads: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


@dataclass(frozen=True)
class LossSpec:
    """Per-row training targets for a batch.

    Each row contributes ``CE(q, label)`` and, where ``mask`` is true,
    ``lam * KL(target, q)``. The batch loss is the mean over rows. With
    ``labels=None`` only the KL part is used.
    """

    labels: np.ndarray | None
    lam: float = 0.0
    targets: np.ndarray | None = None
    mask: np.ndarray | None = None

    @classmethod
    def cross_entropy(cls, labels) -> LossSpec:
        return cls(labels=np.atleast_1d(np.asarray(labels, dtype=np.int64)))

    @classmethod
    def composite(cls, labels, targets, lam: float, mask=None) -> LossSpec:
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if mask is None:
            mask = np.ones(labels.shape[0], dtype=bool)
        return cls(labels=labels, lam=float(lam), targets=targets,
                   mask=np.atleast_1d(np.asarray(mask, dtype=bool)))

    @classmethod
    def kl_only(cls, targets, lam: float = 1.0) -> LossSpec:
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        return cls(labels=None, lam=float(lam), targets=targets,
                   mask=np.ones(targets.shape[0], dtype=bool))

    def _check(self, batch: int, n_classes: int) -> None:
        if self.labels is None:
            if self.targets is None:
                raise ArgumentError("loss spec has neither labels nor targets")
        elif self.labels.shape != (batch,):
            raise DimensionError(f"expected {batch} labels, got shape {self.labels.shape}")
        elif np.any(self.labels < 0) or np.any(self.labels >= n_classes):
            raise ArgumentError(f"labels must lie in [0, {n_classes - 1}]")
        if self.lam < 0:
            raise ArgumentError("lambda must be nonnegative")
        if self.targets is not None:
            if self.targets.shape != (batch, n_classes):
                raise DimensionError(
                    f"targets shape {self.targets.shape} != {(batch, n_classes)}"
                )
            if self.mask is None or self.mask.shape != (batch,):
                raise DimensionError("mask must have one entry per row")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(layers: Sequence[DenseLayer], x) -> tuple[np.ndarray, bool]:
    if not layers:
        raise DimensionError("model has no layers")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != layers[0].in_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match first layer in-dimension {layers[0].in_dim}"
        )
    for prev, nxt in zip(layers, layers[1:]):
        if prev.out_dim != nxt.in_dim:
            raise DimensionError(f"layer widths {prev.out_dim} -> {nxt.in_dim} do not chain")
    return batch, single


def _forward_trace(layers: Sequence[DenseLayer], batch: np.ndarray):
    # Returns the layer inputs, the pre-activations, and the final probabilities.
    inputs, pre = [], []
    a = batch
    for layer in layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return inputs, pre, softmax(a)


def forward(layers: Sequence[DenseLayer], x) -> np.ndarray:
    """Class probabilities for one input vector or a batch of row vectors."""
    batch, single = _as_batch(layers, x)
    probs = _forward_trace(layers, batch)[2]
    return probs[0] if single else probs


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= int(label) < probs.shape[-1]:
        raise ArgumentError(f"label {label} outside [0, {probs.shape[-1] - 1}]")
    return float(-np.log(max(probs[int(label)], EPS)))


def kl_divergence(p, q) -> float:
    """``sum_i p_i ln(p_i / q_i)`` with ``0 ln 0 = 0`` and ``q`` clamped at EPS."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"KL arguments differ in shape: {p.shape} vs {q.shape}")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(np.maximum(q[nz], EPS)))))


def _row_losses(probs: np.ndarray, spec: LossSpec) -> np.ndarray:
    if spec.labels is None:
        ce = np.zeros(probs.shape[0])
    else:
        ce = -np.log(np.maximum(probs[np.arange(probs.shape[0]), spec.labels], EPS))
    if spec.targets is None or spec.lam == 0.0:
        return ce
    p = spec.targets
    logq = np.log(np.maximum(probs, EPS))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - logq), 0.0)
    kl = terms.sum(axis=1)
    return ce + spec.lam * np.where(spec.mask, kl, 0.0)


def loss_value(layers: Sequence[DenseLayer], x, spec: LossSpec) -> float:
    batch, _ = _as_batch(layers, x)
    probs = _forward_trace(layers, batch)[2]
    spec._check(batch.shape[0], probs.shape[1])
    return float(np.mean(_row_losses(probs, spec)))


def backward(layers: Sequence[DenseLayer], x, spec: LossSpec) -> LossGrad:
    """Exact gradient of the batch-mean composite loss.

    The diversity targets are constants; only the model's own output is
    differentiated.
    """
    batch, _ = _as_batch(layers, x)
    inputs, pre, probs = _forward_trace(layers, batch)
    n, n_classes = probs.shape
    spec._check(n, n_classes)
    value = float(np.mean(_row_losses(probs, spec)))

    if spec.labels is None:
        dz = np.zeros_like(probs)
    else:
        dz = probs.copy()
        dz[np.arange(n), spec.labels] -= 1.0
    if spec.targets is not None and spec.lam != 0.0:
        p = spec.targets
        # d/dz KL(p, softmax(z)) = q * sum(p) - p; sum(p) is 1 unless the target is unnormalized.
        kl_grad = probs * p.sum(axis=1, keepdims=True) - p
        dz += spec.lam * np.where(spec.mask[:, None], kl_grad, 0.0)
    dz /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation == "relu":
            dz = dz * (pre[i] > 0)
        grads[i] = (dz.T @ inputs[i], dz.sum(axis=0))
        if i:
            dz = dz @ layer.weights
    return LossGrad(value=value, grads=grads)


def sgd_step(layers: Sequence[DenseLayer], grads: LossGrad, lr: float) -> Sequence[DenseLayer]:
    """In-place ``p <- p - lr * g``. Returns ``layers`` for chaining."""
    if lr < 0:
        raise ArgumentError("learning rate must be nonnegative")
    if len(grads.grads) != len(layers):
        raise DimensionError(f"{len(grads.grads)} gradient pairs for {len(layers)} layers")
    for layer, (gw, gb) in zip(layers, grads.grads):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise DimensionError("gradient shapes do not mirror parameter shapes")
    for layer, (gw, gb) in zip(layers, grads.grads):
        layer.weights -= lr * gw
        layer.bias -= lr * gb
    return layers


def grad_check(layers: Sequence[DenseLayer], x, spec: LossSpec, h: float = 1e-5) -> float:
    """Worst relative disagreement between ``backward`` and central differences."""
    analytic = backward(layers, x, spec).grads
    worst = 0.0
    for layer, (gw, gb) in zip(layers, analytic):
        for param, grad in ((layer.weights, gw), (layer.bias, gb)):
            for j in np.ndindex(param.shape):
                orig = param[j]
                param[j] = orig + h
                up = loss_value(layers, x, spec)
                param[j] = orig - h
                down = loss_value(layers, x, spec)
                param[j] = orig
                fd = (up - down) / (2.0 * h)
                a = grad[j]
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, err)
    return worst


def count_parameters(layers: Sequence[DenseLayer]) -> int:
    return sum(layer.size for layer in layers)
