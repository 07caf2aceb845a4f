"""Round loop, client sampling, FedAvg baseline, metrics and accounting."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import seeding
from .client import LocalTrainConfig, evaluate, local_train
from .datasets import (
    ClientShard,
    Dataset,
    PartitionSpec,
    PublicSet,
    derive_public_set,
    dirichlet_partition,
    generate_synthetic,
    load_csv,
    load_public_csv,
    split_dataset,
)
from .errors import ConfigurationError
from .server import (
    aggregate_same_arch,
    average_client_heads,
    broadcast_server_head,
    client_outputs,
    consensus_targets,
    server_update,
)
from .zoo import (
    BackboneSpec,
    HeterogeneousModel,
    ModelRegistry,
    assign_models,
    registry_init,
    save_checkpoint,
    set_head,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("fed-et", "fedavg")
METRICS_HEADER = (
    "round,algorithm,lambda,seed,sampled_clients,server_test_acc,server_test_loss,"
    "mean_client_train_loss,comm_params_round,comm_params_cumulative,wall_ms"
)


@dataclass(frozen=True)
class RunConfig:
    K: int = 20
    m: int = 5
    U: int = 3
    N: int = 4
    d: int = 8
    u: int = 16
    T: int = 60
    alpha: float = 0.1
    tau: int = 30
    b: int = 32
    eta: float = 0.05
    tau_s: int = 40
    b_s: int = 32
    eta_s: float = 0.01
    lam: float = 0.05
    seed: int = 0
    algorithm: str = "fed-et"
    small_widths: tuple[tuple[int, ...], ...] = ((8,), (16,), (32,))
    server_widths: tuple[int, ...] = (64, 64)
    spread: float = 0.3
    public_noise: float = 0.1
    n_train: int = 4200
    n_public: int = 600
    n_test: int = 1200
    renormalize_diversity: bool = True
    train_path: str = ""
    public_path: str = ""
    test_path: str = ""
    out_dir: str = "run"
    workers: int = 1
    record_time: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "small_widths", tuple(tuple(int(w) for w in ws) for ws in self.small_widths))
        object.__setattr__(self, "server_widths", tuple(int(w) for w in self.server_widths))
        counts = dict(K=self.K, m=self.m, U=self.U, d=self.d, u=self.u, tau=self.tau, b=self.b,
                      tau_s=self.tau_s, b_s=self.b_s, workers=self.workers)
        for name, value in counts.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if self.T < 0:
            raise ConfigurationError("T must be >= 0")
        if self.N < 2:
            raise ConfigurationError("N must be >= 2")
        if self.m > self.K:
            raise ConfigurationError(f"m={self.m} exceeds K={self.K}")
        if self.eta < 0 or self.eta_s < 0:
            raise ConfigurationError("learning rates must be nonnegative")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if len(self.small_widths) != self.U:
            raise ConfigurationError(f"small_widths lists {len(self.small_widths)} models but U={self.U}")

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def small_specs(self) -> list[BackboneSpec]:
        return [BackboneSpec(ws, self.d, self.u) for ws in self.small_widths]

    def server_spec(self) -> BackboneSpec:
        return BackboneSpec(self.server_widths, self.d, self.u)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        lowered = text.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return lowered in ("true", "1", "yes")
    if kind == "str":
        return text
    value = json.loads(text)
    if key == "server_widths":
        return tuple(int(w) for w in value)
    return tuple(tuple(int(w) for w in ws) for ws in value)


def coerce_overrides(pairs: Mapping[str, str]) -> dict:
    out = {}
    for key, text in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"unknown config key {key!r}")
        try:
            out[key] = _parse_value(key, text.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"bad value for {key!r}: {exc}") from None
    return out


def parse_config(text: str) -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigurationError(f"line {line_no}: duplicate key {key!r}")
        pairs[key] = value
    return RunConfig(**coerce_overrides(pairs))


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            text = json.dumps(value).replace("(", "[").replace(")", "]")
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


@dataclass
class FederatedData:
    shards: list[ClientShard]
    public: PublicSet
    test: Dataset

    @property
    def shard_sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


def synthetic_splits(cfg: RunConfig) -> tuple[Dataset, PublicSet, Dataset]:
    """Generate blobs and cut them into train / public / test."""
    total = cfg.n_train + cfg.n_public + cfg.n_test
    full = generate_synthetic(cfg.N, cfg.d, math.ceil(total / cfg.N), cfg.spread,
                              seeding.derive_seed(cfg.seed, seeding.DATA))
    train, pub_src, test = split_dataset(full, (cfg.n_train, cfg.n_public, cfg.n_test),
                                         seeding.derive_seed(cfg.seed, seeding.SPLIT))
    public = derive_public_set(pub_src, cfg.public_noise, seeding.derive_seed(cfg.seed, seeding.PUBLIC))
    return train, public, test


def partition_train(train: Dataset, cfg: RunConfig) -> list[ClientShard]:
    spec = PartitionSpec(cfg.K, cfg.alpha, seeding.derive_seed(cfg.seed, seeding.PARTITION), min_size=cfg.b)
    return dirichlet_partition(train, spec)


def prepare_data(cfg: RunConfig) -> FederatedData:
    """Load the configured CSVs, or generate synthetic data when no paths are set."""
    paths = (cfg.train_path, cfg.public_path, cfg.test_path)
    if any(paths):
        if not all(paths):
            raise ConfigurationError("train_path, public_path and test_path must be set together")
        train, public, test = load_csv(cfg.train_path), load_public_csv(cfg.public_path), load_csv(cfg.test_path)
    else:
        train, public, test = synthetic_splits(cfg)
    for name, dim in (("train", train.dim), ("public", public.inputs.shape[1]), ("test", test.dim)):
        if dim != cfg.d:
            raise ConfigurationError(f"{name} data has {dim} features but d={cfg.d}")
    return FederatedData(partition_train(train, cfg), public, test)


def init_registry(cfg: RunConfig) -> ModelRegistry:
    registry = registry_init(cfg.small_specs(), cfg.server_spec(), cfg.N, cfg.seed)
    registry.assignment = assign_models(range(cfg.K), cfg.U, seeding.derive_seed(cfg.seed, seeding.ASSIGN))
    return registry


def sample_clients(sizes: Sequence[int], m: int, rng: np.random.Generator) -> list[int]:
    """Draw ``m`` distinct clients, each pick proportional to size among those left."""
    if m > len(sizes):
        raise ConfigurationError(f"cannot sample {m} of {len(sizes)} clients")
    if any(s <= 0 for s in sizes):
        raise ConfigurationError("client sizes must be positive")
    remaining = list(range(len(sizes)))
    chosen = []
    for _ in range(m):
        weights = np.array([sizes[k] for k in remaining], dtype=np.float64)
        pick = int(rng.choice(len(remaining), p=weights / weights.sum()))
        chosen.append(remaining.pop(pick))
    return chosen


@dataclass(frozen=True)
class RoundReport:
    round: int
    algorithm: str
    lam: float
    seed: int
    sampled_clients: tuple[int, ...]
    server_test_acc: float
    server_test_loss: float
    mean_client_train_loss: float
    comm_params_round: int
    comm_params_cumulative: int
    wall_ms: int

    def csv_row(self) -> str:
        fields = [
            str(self.round), self.algorithm, repr(float(self.lam)), str(self.seed),
            ";".join(str(k) for k in self.sampled_clients),
            repr(self.server_test_acc), repr(self.server_test_loss), repr(self.mean_client_train_loss),
            str(self.comm_params_round), str(self.comm_params_cumulative), str(self.wall_ms),
        ]
        return ",".join(fields)


@dataclass
class RunState:
    config: RunConfig
    registry: ModelRegistry
    cumulative_comm: int = 0
    reports: list[RoundReport] = field(default_factory=list)


def _train_clients(dispatch: Mapping[int, HeterogeneousModel], shards: Sequence[ClientShard],
                   cfg: RunConfig, t: int) -> dict[int, HeterogeneousModel]:
    train_cfg = LocalTrainConfig(cfg.tau, cfg.b, cfg.eta)
    ids = sorted(dispatch)

    def job(k: int) -> HeterogeneousModel:
        return local_train(dispatch[k], shards[k], train_cfg, seeding.stream(cfg.seed, seeding.LOCAL, t, k))

    if cfg.workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trained = list(pool.map(job, ids))
    else:
        trained = [job(k) for k in ids]
    return dict(zip(ids, trained))


def _finish_round(state: RunState, registry: ModelRegistry, t: int, sampled: list[int],
                  trained: Mapping[int, HeterogeneousModel], data: FederatedData,
                  comm: int, started: float) -> tuple[RunState, RoundReport]:
    cfg = state.config
    server_eval = evaluate(registry.server_model, data.test)
    client_loss = float(np.mean([evaluate(trained[k], data.shards[k]).mean_loss for k in sorted(trained)]))
    cumulative = state.cumulative_comm + comm
    wall = int(round((time.perf_counter() - started) * 1000)) if cfg.record_time else 0
    report = RoundReport(t, cfg.algorithm, cfg.lam, cfg.seed, tuple(sorted(sampled)),
                         server_eval.accuracy, server_eval.mean_loss, client_loss,
                         comm, cumulative, wall)
    return RunState(cfg, registry, cumulative, [*state.reports, report]), report


def run_round(state: RunState, data: FederatedData, t: int) -> tuple[RunState, RoundReport]:
    """One round of ensemble transfer. ``state`` is never modified; a new state is returned."""
    cfg = state.config
    started = time.perf_counter()
    registry = state.registry.copy()
    sampled = sample_clients(data.shard_sizes, cfg.m, seeding.stream(cfg.seed, seeding.SAMPLE, t))
    dispatch = {k: registry.model_for(k) for k in sampled}
    comm = 2 * sum(model.param_count for model in dispatch.values())

    trained = _train_clients(dispatch, data.shards, cfg, t)
    ids = sorted(trained)

    # Server phase: only returned models and the public set are visible here.
    server = registry.server_model.copy()
    set_head(server, average_client_heads([trained[k] for k in ids]))
    targets = consensus_targets(client_outputs(trained, data.public.inputs), cfg.renormalize_diversity)
    server = server_update(server, data.public, targets, cfg.tau_s, cfg.b_s, cfg.eta_s, cfg.lam,
                           seeding.stream(cfg.seed, seeding.SERVER, t))
    groups = {i: [trained[k] for k in ids if registry.assignment[k] == i] for i in registry.small_models}
    registry.small_models = aggregate_same_arch(groups, registry.small_models)
    registry.server_model = server
    broadcast_server_head(server, registry)
    return _finish_round(state, registry, t, sampled, trained, data, comm, started)


def run_fedavg_round(state: RunState, data: FederatedData, t: int) -> tuple[RunState, RoundReport]:
    """Homogeneous baseline: every client trains the server architecture; size-weighted mean."""
    cfg = state.config
    started = time.perf_counter()
    registry = state.registry.copy()
    sampled = sample_clients(data.shard_sizes, cfg.m, seeding.stream(cfg.seed, seeding.SAMPLE, t))
    global_model = registry.server_model
    comm = 2 * cfg.m * global_model.param_count

    trained = _train_clients({k: global_model for k in sampled}, data.shards, cfg, t)
    ids = sorted(trained)
    sizes = np.array([len(data.shards[k]) for k in ids], dtype=np.float64)
    weights = sizes / sizes.sum()
    new_layers = []
    for j, layer in enumerate(global_model.layers):
        base = trained[ids[0]].layers[j]
        w, b = base.weights.copy(), base.bias.copy()
        for wk, k in zip(weights[1:], ids[1:]):
            w += wk * (trained[k].layers[j].weights - base.weights)
            b += wk * (trained[k].layers[j].bias - base.bias)
        new_layers.append(dataclasses.replace(layer, weights=w, bias=b))
    n_backbone = len(global_model.backbone)
    registry.server_model = HeterogeneousModel(
        new_layers[:n_backbone], dataclasses.replace(global_model.head, layers=new_layers[n_backbone:])
    )
    return _finish_round(state, registry, t, sampled, trained, data, comm, started)


@dataclass
class RunResult:
    registry: ModelRegistry
    reports: list[RoundReport]
    metrics_path: str
    checkpoint_path: str


def run_training(cfg: RunConfig, data: FederatedData | None = None,
                 on_round: Callable[[RoundReport], None] | None = None) -> RunResult:
    """Run ``cfg.T`` rounds, appending one metrics row per round, then checkpoint.

    Writes ``metrics.csv`` and ``checkpoint.json`` under ``cfg.out_dir``.
    """
    if data is None:
        data = prepare_data(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    checkpoint_path = os.path.join(cfg.out_dir, "checkpoint.json")
    step = run_round if cfg.algorithm == "fed-et" else run_fedavg_round
    state = RunState(cfg, init_registry(cfg))
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        fh.flush()
        for t in range(cfg.T):
            state, report = step(state, data, t)
            fh.write(report.csv_row() + "\n")
            fh.flush()
            log.info("round %d acc=%.4f comm=%d", t, report.server_test_acc, report.comm_params_cumulative)
            if on_round is not None:
                on_round(report)
    save_checkpoint(state.registry, checkpoint_path)
    return RunResult(state.registry, state.reports, metrics_path, checkpoint_path)


def run_fedavg_baseline(cfg: RunConfig, data: FederatedData | None = None) -> RunResult:
    return run_training(cfg.replace(algorithm="fedavg"), data)


def read_metrics(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
