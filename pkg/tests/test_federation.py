import math
from collections import OrderedDict

import numpy as np
import pytest

from fimp import tensor as T
from fimp.data import GeneratorConfig, Profile, client_data, generate_samples, partition_clients
from fimp.errors import ConfigurationError, InconsistentStateError
from fimp.federation import (
    ClientUpdate,
    NonFiniteError,
    ServerState,
    TrainSchedule,
    build_splits,
    dispatch,
    download_bytes,
    fedavg_aggregate,
    init_server,
    local_train,
    rounds_csv,
    run_experiment,
    weighted_average,
)
from fimp.imputation import Strategy
from fimp.models import GlobalModel, encode_image
from fimp.state import serialized_size

from conftest import small_experiment, tiny_model_config

SCHEDULE = TrainSchedule(local_epochs=2, imputer_epochs=2, lr=1e-2, batch_size=8, imputer_batch_size=8)


def toy_clients(spec="1:1:2", n=16, seed=0):
    train = generate_samples(GeneratorConfig(d_image=4, d_text=5, n_labels=3, seed=seed), 200)
    clients = partition_clients(train, spec, n, seed=seed)
    return clients, {c.id: client_data(train, c) for c in clients}


# -- numpy oracle for the classification losses ------------------------------------------
def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def np_encode(state, prefix, x):
    h = np_gelu(x @ state[f"{prefix}.layers.0.weight"] + state[f"{prefix}.layers.0.bias"])
    z = h @ state[f"{prefix}.layers.1.weight"] + state[f"{prefix}.layers.1.bias"]
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def np_bce(state, z_i, z_t, y):
    logits = np.hstack([z_i, z_t]) @ state["classifier.weight"] + state["classifier.bias"]
    p = 1 / (1 + np.exp(-logits))
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


# -- dispatch ------------------------------------------------------------------------------
def test_dispatch_copies_are_equal_and_independent():
    clients, _ = toy_clients("4:3:3", n=5)
    server = ServerState(GlobalModel(tiny_model_config(), 0), clients, Strategy.FIN)
    copies = dispatch(server)
    assert len(copies) == 10
    for k, v in copies[0].state_dict().items():
        assert np.array_equal(v, server.model.state_dict()[k])
    copies[0].classifier.weight.data += 1.0
    assert not np.array_equal(copies[0].classifier.weight.data, server.model.classifier.weight.data)
    assert not np.array_equal(copies[0].classifier.weight.data, copies[1].classifier.weight.data)
    full = serialized_size(server.model.main_state()) + 2 * serialized_size(server.model.imputer_text.state_dict())
    assert download_bytes(server) == full
    server.strategy = Strategy.ZERO
    assert download_bytes(server) == serialized_size(server.model.main_state())


# -- local training ----------------------------------------------------------------------------
def test_phase_two_leaves_main_model_untouched():
    clients, data = toy_clients()
    mm = clients[-1]
    fin_model, zero_model = GlobalModel(tiny_model_config(), 1), GlobalModel(tiny_model_config(), 1)
    fin = local_train(mm, data[mm.id], fin_model, SCHEDULE, Strategy.FIN, 0, 1)
    zero = local_train(mm, data[mm.id], zero_model, SCHEDULE, Strategy.ZERO, 0, 1)
    for k in fin.main:
        assert np.array_equal(fin.main[k], zero.main[k])
    assert fin.imputer_text is not None and zero.imputer_text is None
    initial = GlobalModel(tiny_model_config(), 1).imputer_text.state_dict()
    assert not np.array_equal(fin.imputer_text["blocks.0.ffn_in.weight"], initial["blocks.0.ffn_in.weight"])


def test_phase_two_gradient_never_reaches_encoders(tiny_model):
    x = np.random.default_rng(0).normal(size=(5, 4))
    with T.no_grad():
        pool = encode_image(tiny_model, x).data
    T.mse(tiny_model.imputer_text(T.Tensor(pool)), pool).backward()
    assert all(p.grad is None for p in tiny_model.image_encoder.parameters())
    assert all(p.grad is None for p in tiny_model.text_encoder.parameters())
    assert all(p.grad is not None for p in tiny_model.imputer_text.parameters())


def test_phase_two_pool_matches_partition(monkeypatch):
    from fimp import federation

    seen = []
    original = federation._train_imputer
    monkeypatch.setattr(federation, "_train_imputer", lambda imp, src, tgt, *a: seen.append((len(src), len(tgt))) or original(imp, src, tgt, *a))
    clients, data = toy_clients(n=13)
    mm = clients[-1]
    local_train(mm, data[mm.id], GlobalModel(tiny_model_config(), 0), SCHEDULE, Strategy.FIN, 0, 1)
    assert seen == [(13, 13), (13, 13)]


def test_phase_one_loss_decreases_in_most_runs():
    decreased = 0
    for seed in range(3):
        clients, data = toy_clients("0:0:1", n=64, seed=seed)
        schedule = TrainSchedule(local_epochs=3, lr=1e-3, batch_size=16)
        update = local_train(clients[0], data[0], GlobalModel(tiny_model_config(), seed), schedule, Strategy.ZERO, seed, 1)
        decreased += update.loss_trace[-1] < update.loss_trace[0]
    assert decreased >= 2


def test_reported_losses_match_independent_recomputation():
    clients, data = toy_clients()
    img, mm = clients[0], clients[-1]
    up = local_train(mm, data[mm.id], GlobalModel(tiny_model_config(), 2), SCHEDULE, Strategy.ZERO, 0, 1)
    d = data[mm.id]
    expected = np_bce(up.main, np_encode(up.main, "image_encoder", d.image), np_encode(up.main, "text_encoder", d.text), d.labels)
    assert abs(up.loss - expected) < 1e-10
    up = local_train(img, data[img.id], GlobalModel(tiny_model_config(), 2), SCHEDULE, Strategy.ZERO, 0, 1)
    d = data[img.id]
    z = np_encode(up.main, "image_encoder", d.image)
    assert abs(up.loss - np_bce(up.main, z, np.zeros_like(z), d.labels)) < 1e-10


def test_image_only_client_frozen_paths():
    clients, data = toy_clients()
    img = clients[0]
    assert img.profile is Profile.IMAGE_ONLY
    for strategy in Strategy:
        model = GlobalModel(tiny_model_config(), 3)
        text_before = model.text_encoder.state_dict()
        phi_before = model.imputer_text.state_dict(), model.imputer_image.state_dict()
        update = local_train(img, data[img.id], model, SCHEDULE, strategy, 0, 1)
        for k, v in text_before.items():
            assert np.array_equal(update.main["text_encoder." + k], v)
        for before, after in zip(phi_before, (model.imputer_text.state_dict(), model.imputer_image.state_dict())):
            assert all(np.array_equal(before[k], after[k]) for k in before)
        assert update.imputer_text is None


def test_zero_fill_text_block_gradient_is_zero(tiny_model):
    from fimp.federation import unimodal_loss
    from fimp.imputation import ImputationStrategy

    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(7, 4)), rng.integers(0, 2, size=(7, 3)).astype(np.uint8)
    unimodal_loss(tiny_model, Profile.IMAGE_ONLY, x, y, ImputationStrategy(Strategy.ZERO), None).backward()
    grad = tiny_model.classifier.weight.grad
    assert not grad[8:].any()
    assert grad[:8].any()


def test_non_finite_parameters_abort():
    clients, data = toy_clients("0:0:1")
    data[0].image[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        local_train(clients[0], data[0], GlobalModel(tiny_model_config(), 0), SCHEDULE, Strategy.ZERO, 0, 1)


def test_profile_strategy_mismatch_rejected():
    clients, data = toy_clients()
    model = GlobalModel(tiny_model_config(), 0, with_imputers=False)
    with pytest.raises(ConfigurationError):
        local_train(clients[0], data[0], model, SCHEDULE, Strategy.FIN, 0, 1)


# -- aggregation ------------------------------------------------------------------------------
def test_weighted_mean_example():
    out = weighted_average([{"w": np.array([1.0, 3.0])}, {"w": np.array([5.0, 7.0])}], [1, 3])
    assert out["w"].tolist() == [4.0, 6.0]


def make_updates(seed=0, profiles=(Profile.IMAGE_ONLY, Profile.MULTIMODAL, Profile.MULTIMODAL)):
    rng = np.random.default_rng(seed)
    ref = GlobalModel(tiny_model_config(), 0)
    updates = []
    for cid, profile in enumerate(profiles):
        main = OrderedDict((k, v + rng.normal(size=v.shape)) for k, v in ref.main_state().items())
        u = ClientUpdate(cid, profile, main, int(rng.integers(5, 50)), 0.0)
        if profile is Profile.MULTIMODAL:
            u.imputer_text = OrderedDict((k, v + rng.normal(size=v.shape)) for k, v in ref.imputer_text.state_dict().items())
            u.imputer_image = OrderedDict((k, v + rng.normal(size=v.shape)) for k, v in ref.imputer_image.state_dict().items())
        updates.append(u)
    return ref, updates


def server_for(updates, strategy=Strategy.FIN):
    clients = [type("C", (), {"id": u.client_id, "n_samples": u.n_samples})() for u in updates]
    return ServerState(GlobalModel(tiny_model_config(), 0), clients, strategy)


def test_idempotent_on_identical_updates():
    ref, updates = make_updates()
    for u in updates:
        u.main = updates[0].main
        if u.imputer_text is not None:
            u.imputer_text, u.imputer_image = updates[1].imputer_text, updates[1].imputer_image
    server = fedavg_aggregate(server_for(updates), updates)
    for k, v in server.model.main_state().items():
        assert np.array_equal(v, updates[0].main[k])
    for k, v in server.model.imputer_text.state_dict().items():
        assert np.array_equal(v, updates[1].imputer_text[k])


def test_permutation_invariance_is_bitwise():
    _, updates = make_updates(seed=1, profiles=(Profile.IMAGE_ONLY,) * 3 + (Profile.MULTIMODAL,) * 4)
    base = fedavg_aggregate(server_for(updates), updates).model.state_dict()
    rng = np.random.default_rng(0)
    for _ in range(5):
        shuffled = [updates[i] for i in rng.permutation(len(updates))]
        other = fedavg_aggregate(server_for(updates), shuffled).model.state_dict()
        assert all(np.array_equal(base[k], other[k]) for k in base)


def test_selective_aggregation_by_hand():
    _, updates = make_updates(seed=2)
    server = fedavg_aggregate(server_for(updates), updates)
    n = [u.n_samples for u in updates]
    for k, v in server.model.main_state().items():
        hand = sum(n_c * u.main[k] for n_c, u in zip(n, updates)) / sum(n)
        assert np.allclose(v, hand, rtol=0, atol=1e-12)
    w1, w2 = n[1] / (n[1] + n[2]), n[2] / (n[1] + n[2])
    assert w1 + w2 == pytest.approx(1.0)
    for k, v in server.model.imputer_text.state_dict().items():
        assert np.allclose(v, w1 * updates[1].imputer_text[k] + w2 * updates[2].imputer_text[k], rtol=0, atol=1e-12)
    assert server.round_index == 1


def test_untouched_unimodal_submodules_enter_average_unchanged():
    clients, data = toy_clients("1:0:1")
    server = ServerState(GlobalModel(tiny_model_config(), 0), clients, Strategy.ZERO)
    start_text = server.model.text_encoder.state_dict()
    updates = [local_train(c, data[c.id], m, SCHEDULE, Strategy.ZERO, 0, 1) for c, m in zip(clients, dispatch(server))]
    fedavg_aggregate(server, updates)
    n0, n1 = updates[0].n_samples, updates[1].n_samples
    for k, v in server.model.text_encoder.state_dict().items():
        hand = (n0 * start_text[k] + n1 * updates[1].main["text_encoder." + k]) / (n0 + n1)
        assert np.allclose(v, hand, rtol=0, atol=1e-12)


def test_imputer_upload_must_match_profile():
    _, updates = make_updates()
    updates[0].imputer_text = updates[1].imputer_text
    with pytest.raises(InconsistentStateError):
        fedavg_aggregate(server_for(updates), updates)
    with pytest.raises(InconsistentStateError):
        weighted_average([], [])


# -- experiment driver -----------------------------------------------------------------------
def test_zero_rounds_evaluates_initial_model():
    result = run_experiment(small_experiment(rounds=0), seed=0)
    assert [r.round for r in result.reports] == [0]
    assert result.reports[0].bytes_up == 0 and result.reports[0].client_losses == {}


def test_fin_and_zero_agree_without_unimodal_clients():
    trajectories, results = {}, {}
    for strategy in ("fin", "zero"):
        cfg = small_experiment(partition="0:0:2", imputation=strategy, rounds=3)
        states = trajectories[strategy] = []
        results[strategy] = run_experiment(cfg, 0, on_round=lambda r, server: states.append(server.model.main_state()))
    assert len(trajectories["fin"]) == 3
    for fin_state, zero_state in zip(trajectories["fin"], trajectories["zero"]):
        assert all(np.array_equal(v, zero_state[k]) for k, v in fin_state.items())
    fin, zero = results["fin"], results["zero"]
    assert [r.val.value for r in fin.reports] == [r.val.value for r in zero.reports]
    assert [r.client_losses for r in fin.reports] == [r.client_losses for r in zero.reports]


def test_serial_and_parallel_clients_agree():
    cfg = small_experiment(imputation="uniform")
    serial = run_experiment(cfg, 3, workers=1)
    parallel = run_experiment(cfg, 3, workers=3)
    assert rounds_csv(serial.reports) == rounds_csv(parallel.reports)


def test_upload_bytes_accounting():
    cfg = small_experiment(rounds=1)
    fin = run_experiment(cfg, 0)
    zero = run_experiment(cfg.replace(imputation="zero"), 0)
    phi = serialized_size(fin.server.model.imputer_text.state_dict())
    main = serialized_size(fin.server.model.main_state())
    assert zero.reports[0].bytes_up == 5 * main
    assert fin.reports[0].bytes_up - zero.reports[0].bytes_up == 2 * phi * cfg.counts[2]


def test_fin_needs_a_multimodal_client():
    cfg = small_experiment(partition="2:1:0")
    with pytest.raises(ConfigurationError):
        init_server(cfg, 0, build_splits(cfg, 0))
