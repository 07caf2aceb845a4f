import numpy as np
import pytest

from fedet import orchestrator, seeding
from fedet.client import LocalTrainConfig, local_train
from fedet.datasets import ClientShard, PublicSet, generate_synthetic
from fedet.errors import ConfigurationError
from fedet.orchestrator import (
    METRICS_HEADER,
    FederatedData,
    RunConfig,
    RunState,
    format_config,
    init_registry,
    parse_config,
    prepare_data,
    read_metrics,
    run_fedavg_baseline,
    run_round,
    run_training,
    sample_clients,
)
from fedet.zoo import load_checkpoint
from helpers import params_equal


def small_config(tmp_path, **changes):
    base = dict(K=6, m=3, U=2, N=3, d=4, u=6, T=3, alpha=0.5, tau=3, b=8, eta=0.1,
                tau_s=4, b_s=16, eta_s=0.05, lam=0.05, seed=3,
                small_widths=((4,), (8,)), server_widths=(24,),
                n_train=300, n_public=60, n_test=90, out_dir=str(tmp_path / "run"))
    base.update(changes)
    return RunConfig(**base)


def registry_equal(a, b):
    return params_equal(a.server_model, b.server_model) and all(
        params_equal(a.small_models[i], b.small_models[i]) for i in a.small_models
    )


def layer_count(model):
    """Independent parameter count straight from the array shapes."""
    total = 0
    for layer in model.layers:
        rows, cols = layer.weights.shape
        total += rows * cols + layer.bias.shape[0]
    return total


# --- sampling ------------------------------------------------------------

def test_sampling_equal_sizes_is_uniform():
    rng = np.random.default_rng(0)
    k, m, trials = 10, 3, 10_000
    counts = np.zeros(k)
    for _ in range(trials):
        picked = sample_clients([50] * k, m, rng)
        assert len(set(picked)) == m
        counts[picked] += 1
    expected = trials * m / k
    assert np.all(np.abs(counts - expected) <= 0.05 * expected)


def test_sampling_all_clients():
    assert sorted(sample_clients([1, 1000, 3, 7], 4, np.random.default_rng(1))) == [0, 1, 2, 3]


def test_sampling_dominant_client():
    rng = np.random.default_rng(2)
    hits = sum(sample_clients([99, 1], 1, rng) == [0] for _ in range(10_000))
    assert abs(hits / 10_000 - 0.99) <= 0.005


def test_sampling_errors():
    with pytest.raises(ConfigurationError):
        sample_clients([3, 4], 3, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        sample_clients([3, 0], 1, np.random.default_rng(0))


# --- config --------------------------------------------------------------

def test_config_text_round_trip():
    cfg = RunConfig(K=7, m=2, lam=0.5, small_widths=((3,), (5, 5), (9,)), record_time=True, out_dir="x y")
    assert parse_config(format_config(cfg)) == cfg


def test_config_parse_comments_and_defaults():
    cfg = parse_config("# header\nK = 9   # clients\n\nlam=0.5\nserver_widths = [70, 70]\n")
    assert (cfg.K, cfg.lam, cfg.server_widths, cfg.m) == (9, 0.5, (70, 70), RunConfig().m)


@pytest.mark.parametrize("text", [
    "bogus = 1\n",
    "K = 3\nK = 4\n",
    "K = three\n",
    "K 3\n",
    "m = 30\n",
    "lam = -1\n",
    "algorithm = sgd\n",
    "small_widths = [[4]]\n",
    "record_time = maybe\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


# --- rounds --------------------------------------------------------------

def test_round_accounting_and_sampling_stream(tmp_path):
    cfg = small_config(tmp_path)
    data = prepare_data(cfg)
    state = RunState(cfg, init_registry(cfg))
    total = 0
    for t in range(3):
        prev = state.registry
        state, report = run_round(state, data, t)
        want_ids = sample_clients(data.shard_sizes, cfg.m, seeding.stream(cfg.seed, seeding.SAMPLE, t))
        assert report.sampled_clients == tuple(sorted(want_ids))
        want = 2 * sum(layer_count(prev.small_models[prev.assignment[k]]) for k in want_ids)
        assert report.comm_params_round == want
        total += want
        assert report.comm_params_cumulative == total
    assert state.cumulative_comm == total


def test_zero_rates_leave_models_unchanged(tmp_path):
    cfg = small_config(tmp_path, eta=0.0, eta_s=0.0)
    data = prepare_data(cfg)
    state = RunState(cfg, init_registry(cfg))
    before = state.registry.copy()
    for t in range(2):
        state, report = run_round(state, data, t)
        assert report.comm_params_round > 0
    assert registry_equal(state.registry, before)


def test_round_is_atomic_on_error(tmp_path, monkeypatch):
    cfg = small_config(tmp_path)
    data = prepare_data(cfg)
    state = RunState(cfg, init_registry(cfg))
    state, _ = run_round(state, data, 0)
    snapshot = state.registry.copy()

    def fail(*args, **kwargs):
        raise RuntimeError("server failure")

    monkeypatch.setattr(orchestrator, "server_update", fail)
    with pytest.raises(RuntimeError):
        run_round(state, data, 1)
    assert registry_equal(state.registry, snapshot)
    assert len(state.reports) == 1 and state.cumulative_comm == state.reports[0].comm_params_cumulative


def test_server_update_sees_only_public_inputs(tmp_path, monkeypatch):
    cfg = small_config(tmp_path, T=1)
    data = prepare_data(cfg)
    calls = []
    real_update = orchestrator.server_update

    def guarded_update(server, public, *args, **kwargs):
        calls.append(type(public))
        return real_update(server, public, *args, **kwargs)

    monkeypatch.setattr(orchestrator, "server_update", guarded_update)
    run_round(RunState(cfg, init_registry(cfg)), data, 0)
    assert calls == [PublicSet]


# --- full runs -----------------------------------------------------------

def test_training_writes_metrics_and_checkpoint(tmp_path):
    cfg = small_config(tmp_path)
    result = run_training(cfg)
    lines = open(result.metrics_path).read().splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 1 + cfg.T
    rows = read_metrics(result.metrics_path)
    assert [int(r["round"]) for r in rows] == [0, 1, 2]
    assert all(r["wall_ms"] == "0" and r["algorithm"] == "fed-et" for r in rows)
    cum = np.cumsum([int(r["comm_params_round"]) for r in rows])
    assert [int(r["comm_params_cumulative"]) for r in rows] == cum.tolist()
    assert all(len(r["sampled_clients"].split(";")) == cfg.m for r in rows)
    assert registry_equal(load_checkpoint(result.checkpoint_path), result.registry)


def test_zero_rounds(tmp_path):
    cfg = small_config(tmp_path, T=0)
    result = run_training(cfg)
    assert open(result.metrics_path).read() == METRICS_HEADER + "\n"
    assert registry_equal(result.registry, init_registry(cfg))


def test_rerun_is_byte_identical(tmp_path):
    a = run_training(small_config(tmp_path, out_dir=str(tmp_path / "a")))
    b = run_training(small_config(tmp_path, out_dir=str(tmp_path / "b")))
    c = run_training(small_config(tmp_path, out_dir=str(tmp_path / "c"), workers=3))
    ref = open(a.metrics_path, "rb").read()
    assert open(b.metrics_path, "rb").read() == ref
    assert open(c.metrics_path, "rb").read() == ref
    assert open(a.checkpoint_path, "rb").read() == open(c.checkpoint_path, "rb").read()


def test_record_time_fills_wall_column(tmp_path):
    rows = read_metrics(run_training(small_config(tmp_path, T=1, record_time=True)).metrics_path)
    assert int(rows[0]["wall_ms"]) >= 0


def test_partial_metrics_survive_abort(tmp_path):
    cfg = small_config(tmp_path, T=3)

    def stop(report):
        if report.round == 1:
            raise OSError("disk went away")

    with pytest.raises(OSError):
        run_training(cfg, on_round=stop)
    lines = open(tmp_path / "run" / "metrics.csv").read().splitlines()
    assert lines[0] == METRICS_HEADER and len(lines) == 3


def test_csv_data_paths(tmp_path):
    from fedet.datasets import save_csv
    from fedet.orchestrator import synthetic_splits

    cfg = small_config(tmp_path, T=1)
    train, public, test = synthetic_splits(cfg)
    for name, ds in (("train", train), ("public", public), ("test", test)):
        save_csv(ds, tmp_path / f"{name}.csv")
    from_files = cfg.replace(train_path=str(tmp_path / "train.csv"), public_path=str(tmp_path / "public.csv"),
                             test_path=str(tmp_path / "test.csv"), out_dir=str(tmp_path / "files"))
    a = read_metrics(run_training(from_files).metrics_path)
    b = read_metrics(run_training(cfg.replace(out_dir=str(tmp_path / "gen"))).metrics_path)
    assert a == b
    with pytest.raises(ConfigurationError):
        prepare_data(cfg.replace(train_path=str(tmp_path / "train.csv")))
    with pytest.raises(ConfigurationError):
        prepare_data(from_files.replace(d=5))


# --- FedAvg baseline -----------------------------------------------------

def test_fedavg_single_client_is_sequential_sgd(tmp_path):
    cfg = small_config(tmp_path, K=1, m=1, U=1, small_widths=((4,),), T=4)
    data = prepare_data(cfg)
    result = run_fedavg_baseline(cfg, data)
    model = init_registry(cfg).server_model
    local = LocalTrainConfig(cfg.tau, cfg.b, cfg.eta)
    for t in range(cfg.T):
        model = local_train(model, data.shards[0], local, seeding.stream(cfg.seed, seeding.LOCAL, t, 0))
    assert params_equal(result.registry.server_model, model)


def test_fedavg_identical_clients_are_idempotent(tmp_path):
    shard = generate_synthetic(3, 4, 10, 0.3, seed=0)
    # Full-batch single step: both clients compute the same update.
    cfg = small_config(tmp_path, K=2, m=2, T=1, tau=1, b=len(shard))
    data = FederatedData([ClientShard(shard.features, shard.labels, client_id=k) for k in (0, 1)],
                         PublicSet(shard.features), shard)
    result = run_fedavg_baseline(cfg, data)
    single = local_train(init_registry(cfg).server_model, shard, LocalTrainConfig(1, len(shard), cfg.eta),
                         np.random.default_rng(0))
    for x, y in zip(result.registry.server_model.layers, single.layers):
        np.testing.assert_allclose(x.weights, y.weights, rtol=0, atol=1e-15)


def test_fedavg_communicates_more(tmp_path):
    cfg = small_config(tmp_path)
    data = prepare_data(cfg)
    fedavg = run_fedavg_baseline(cfg.replace(out_dir=str(tmp_path / "fa")), data)
    fedet = run_training(cfg.replace(out_dir=str(tmp_path / "fe")), data)
    server_size = layer_count(init_registry(cfg).server_model)
    for fa, fe in zip(fedavg.reports, fedet.reports):
        assert fa.comm_params_round == 2 * cfg.m * server_size
        assert fa.comm_params_round > fe.comm_params_round
    assert all(r.algorithm == "fedavg" for r in fedavg.reports)
