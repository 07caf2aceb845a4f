"""Heterogeneous client backbones, the shared head, and the model registry.

Every model is ``backbone -> head``. Backbones differ in width and depth;
the head (``u -> u`` ReLU, then ``u -> N``) has one shape system-wide so
heads can be averaged and copied between models.

Checkpoint layout (JSON, UTF-8)::

    {
      "format": "fedet-checkpoint",
      "version": 1,
      "assignment": {"<client_id>": <model_id>, ...},
      "manifest": [
        {"name": "small/1/backbone/0/weights", "shape": [16, 8], "activation": "relu"},
        {"name": "small/1/backbone/0/bias", "shape": [16]},
        ...
        {"name": "server/head/1/bias", "shape": [4]}
      ],
      "tensors": {"<name>": [flat row-major values], ...}
    }

Tensor names are ``<model>/<part>/<layer index>/<weights|bias>`` where
``<model>`` is ``small/<id>`` or ``server``. The manifest lists tensors in
layer order. Floats are written with Python's shortest round-trip repr, so
a load reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import seeding
from .errors import ArgumentError, CheckpointError, ConfigurationError, DimensionError
from .numerics import DenseLayer, count_parameters, forward

CHECKPOINT_FORMAT = "fedet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    hidden_widths: tuple[int, ...]
    input_dim: int
    feature_dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.feature_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ArgumentError(f"all widths must be positive: {self}")

    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.feature_dim]


@dataclass
class Head:
    layers: list[DenseLayer]

    @property
    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(layer.weights.shape, layer.bias.shape) for layer in self.layers]

    def copy(self) -> Head:
        return Head([layer.copy() for layer in self.layers])


@dataclass
class HeterogeneousModel:
    backbone: list[DenseLayer]
    head: Head

    @property
    def layers(self) -> list[DenseLayer]:
        # Shares the layer objects, so in-place SGD on this list updates the model.
        return [*self.backbone, *self.head.layers]

    @property
    def param_count(self) -> int:
        return count_parameters(self.layers)

    def predict_proba(self, x) -> np.ndarray:
        return forward(self.layers, x)

    def copy(self) -> HeterogeneousModel:
        return HeterogeneousModel([layer.copy() for layer in self.backbone], self.head.copy())

    def same_shape(self, other: HeterogeneousModel) -> bool:
        mine, theirs = self.layers, other.layers
        return len(mine) == len(theirs) and all(
            a.weights.shape == b.weights.shape and a.activation == b.activation
            for a, b in zip(mine, theirs)
        )


@dataclass
class ModelRegistry:
    small_models: dict[int, HeterogeneousModel]
    server_model: HeterogeneousModel
    assignment: dict[int, int] = field(default_factory=dict)

    def model_for(self, client_id: int) -> HeterogeneousModel:
        return self.small_models[self.assignment[client_id]]

    def copy(self) -> ModelRegistry:
        return ModelRegistry(
            {i: m.copy() for i, m in self.small_models.items()},
            self.server_model.copy(),
            dict(self.assignment),
        )


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str) -> DenseLayer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return DenseLayer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), activation)


def build_model(spec: BackboneSpec, n_classes: int, seed: int) -> HeterogeneousModel:
    """Xavier-uniform weights, zero biases; a pure function of its arguments."""
    if n_classes < 2:
        raise ArgumentError("need at least two classes")
    rng = np.random.default_rng(seed)
    widths = spec.widths()
    backbone = [_xavier(rng, a, b, "relu") for a, b in zip(widths, widths[1:])]
    u = spec.feature_dim
    head = Head([_xavier(rng, u, u, "relu"), _xavier(rng, u, n_classes, "identity")])
    return HeterogeneousModel(backbone, head)


def registry_init(specs: Sequence[BackboneSpec], server_spec: BackboneSpec, n_classes: int,
                  seed: int) -> ModelRegistry:
    """Build small models ``1..U`` and the server model.

    Every small model starts from a copy of the server's head, so the head
    is common to the whole registry from the outset. The server must hold
    strictly more parameters than every small model.
    """
    if not specs:
        raise ConfigurationError("need at least one small model")
    dims = {(s.input_dim, s.feature_dim) for s in [*specs, server_spec]}
    if len(dims) != 1:
        raise ConfigurationError("all models must share input_dim and feature_dim")
    small = {
        i: build_model(spec, n_classes, seeding.derive_seed(seed, seeding.INIT, i))
        for i, spec in enumerate(specs, start=1)
    }
    server = build_model(server_spec, n_classes, seeding.derive_seed(seed, seeding.INIT, 0))
    largest = max(m.param_count for m in small.values())
    if server.param_count <= largest:
        raise ConfigurationError(
            f"server model has {server.param_count} parameters, not more than the "
            f"largest small model ({largest})"
        )
    for model in small.values():
        set_head(model, server.head)
    return ModelRegistry(small, server)


def assign_models(client_ids: Sequence[int], n_models: int, seed: int) -> dict[int, int]:
    """Each client independently draws a model id uniform on ``1..n_models``."""
    if n_models < 1:
        raise ArgumentError("need at least one model id")
    rng = np.random.default_rng(seed)
    draws = rng.integers(1, n_models + 1, size=len(client_ids))
    return {int(k): int(i) for k, i in zip(client_ids, draws)}


def get_head(model: HeterogeneousModel) -> Head:
    return model.head.copy()


def set_head(model: HeterogeneousModel, head: Head) -> None:
    if head.shapes != model.head.shapes:
        raise DimensionError(f"head shapes {head.shapes} != {model.head.shapes}")
    model.head = head.copy()


def _model_entries(name: str, model: HeterogeneousModel):
    for part, layers in (("backbone", model.backbone), ("head", model.head.layers)):
        for i, layer in enumerate(layers):
            yield f"{name}/{part}/{i}/weights", layer.weights, layer.activation
            yield f"{name}/{part}/{i}/bias", layer.bias, None


def save_checkpoint(registry: ModelRegistry, path: str | os.PathLike) -> None:
    """Write ``registry`` atomically (temporary file, then rename)."""
    manifest, tensors = [], {}
    models = [(f"small/{i}", m) for i, m in sorted(registry.small_models.items())]
    models.append(("server", registry.server_model))
    for model_name, model in models:
        for name, arr, activation in _model_entries(model_name, model):
            entry = {"name": name, "shape": list(arr.shape)}
            if activation is not None:
                entry["activation"] = activation
            manifest.append(entry)
            tensors[name] = arr.reshape(-1).tolist()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "assignment": {str(k): v for k, v in sorted(registry.assignment.items())},
        "manifest": manifest,
        "tensors": tensors,
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike, like: ModelRegistry | None = None) -> ModelRegistry:
    """Read a checkpoint; with ``like``, also require identical tensor shapes."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not valid JSON: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("unrecognised checkpoint format or version")

    tensors = doc.get("tensors", {})
    layers: dict[str, dict[str, dict[int, dict]]] = {}
    for entry in doc.get("manifest", []):
        name = entry.get("name", "?")
        parts = name.split("/")
        if len(parts) not in (4, 5) or parts[-1] not in ("weights", "bias"):
            raise CheckpointError("malformed tensor name", name)
        model_name, part, idx, kind = "/".join(parts[:-3]), parts[-3], parts[-2], parts[-1]
        if part not in ("backbone", "head") or not idx.isdigit():
            raise CheckpointError("malformed tensor name", name)
        shape = entry.get("shape")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
            raise CheckpointError("bad shape in manifest", name)
        if name not in tensors:
            raise CheckpointError("listed in manifest but missing from tensors", name)
        values = np.asarray(tensors[name], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{values.size} values for shape {shape}", name)
        slot = layers.setdefault(model_name, {}).setdefault(part, {}).setdefault(int(idx), {})
        slot[kind] = values.reshape(shape)
        if kind == "weights":
            slot["activation"] = entry.get("activation", "relu")

    def _build(model_name: str) -> HeterogeneousModel:
        if model_name not in layers:
            raise CheckpointError(f"model {model_name!r} missing from manifest")
        built = {}
        for part in ("backbone", "head"):
            group = layers[model_name].get(part, {})
            built[part] = []
            for i in range(len(group)):
                name = f"{model_name}/{part}/{i}"
                slot = group.get(i)
                if slot is None or "weights" not in slot or "bias" not in slot:
                    raise CheckpointError("layer is incomplete", name)
                try:
                    built[part].append(DenseLayer(slot["weights"], slot["bias"], slot["activation"]))
                except (DimensionError, ArgumentError) as exc:
                    raise CheckpointError(str(exc), name) from None
        return HeterogeneousModel(built["backbone"], Head(built["head"]))

    small_ids = sorted(int(k.split("/")[1]) for k in layers if k.startswith("small/"))
    registry = ModelRegistry(
        {i: _build(f"small/{i}") for i in small_ids},
        _build("server"),
        {int(k): int(v) for k, v in doc.get("assignment", {}).items()},
    )
    if like is not None:
        _check_compatible(registry, like)
    return registry


def _check_compatible(loaded: ModelRegistry, like: ModelRegistry) -> None:
    if sorted(loaded.small_models) != sorted(like.small_models):
        raise CheckpointError(
            f"small model ids {sorted(loaded.small_models)} != {sorted(like.small_models)}"
        )
    pairs = [(f"small/{i}", loaded.small_models[i], like.small_models[i]) for i in like.small_models]
    pairs.append(("server", loaded.server_model, like.server_model))
    for name, got, want in pairs:
        got_entries = list(_model_entries(name, got))
        want_entries = list(_model_entries(name, want))
        if len(got_entries) != len(want_entries):
            raise CheckpointError("layer count differs from the configured model", name)
        for (tname, a, _), (_, b, _) in zip(got_entries, want_entries):
            if a.shape != b.shape:
                raise CheckpointError(f"shape {a.shape} != configured {b.shape}", tname)
