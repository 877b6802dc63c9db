"""Engine behavior: aggregation, sampling, ledgers, phases, determinism."""

import numpy as np
import pytest

from splitsim.comm import CostModel, closed_form_comm
from splitsim.data import dirichlet_partition, make_synthetic, split_validation
from splitsim.errors import ConfigError, ProtocolError
from splitsim.models import (
    activation_bytes,
    build_model,
    generate_auxiliary,
    param_bytes,
    split_model,
    toy_cnn,
    toy_mlp,
)
from splitsim.protocols import (
    EarlyStopper,
    TrainingConfig,
    build_activation_set,
    device_sampling,
    evaluate_chain,
    fedavg,
    local_batches,
    run_fl,
    run_sfl,
    run_uit,
    run_uit_no_consolidation,
    train_chain_batch,
)

SPEC = toy_mlp(classes=4, input_dim=8, hidden=(12, 12))


def _setup(n=400, devices=4, alpha=0.5, seed=2):
    ds = make_synthetic(n, SPEC.classes, "gaussian-blobs", SPEC.input_shape, seed=seed)
    train, val = split_validation(ds, 0.1, seed)
    part = dirichlet_partition(train, devices, alpha, seed=seed)
    return part, val


def _cfg(**kw):
    base = dict(devices=4, devices_per_round=4, split_point=1, epochs_device=4,
                epochs_server=4, batch_device=16, batch_server=16, patience=20,
                lr_device=0.05, lr_server=0.05, seed=2)
    base.update(kw)
    return TrainingConfig(**base)


# ---------------------------------------------------------------------------
# fedavg


def test_fedavg_symmetry_example():
    a = [{"w": np.array([0.0, 2.0], dtype=np.float32)}]
    b = [{"w": np.array([2.0, 0.0], dtype=np.float32)}]
    out = fedavg([a, b], [1, 1])
    assert np.array_equal(out[0]["w"], [1.0, 1.0])


def test_fedavg_identical_models_is_bitwise_identity():
    rng = np.random.default_rng(0)
    params = [{"w": rng.normal(size=(7, 5)).astype(np.float32),
               "b": rng.normal(size=5).astype(np.float32)}]
    copies = [[{k: v.copy() for k, v in p.items()} for p in params] for _ in range(3)]
    out = fedavg(copies, [1, 2, 3])
    assert np.array_equal(out[0]["w"], params[0]["w"])
    assert np.array_equal(out[0]["b"], params[0]["b"])


def test_fedavg_matches_brute_force_weighted_mean():
    rng = np.random.default_rng(1)
    models = [
        [{"w": rng.normal(size=(6, 4)).astype(np.float32)},
         {"w": rng.normal(size=(4, 2)).astype(np.float32)}]
        for _ in range(3)
    ]
    weights = [1, 2, 3]
    out = fedavg(models, weights)
    for li in range(2):
        expected = sum(w * m[li]["w"].astype(np.float64) for m, w in zip(models, weights)) / 6
        assert np.abs(out[li]["w"] - expected).max() < 1e-6


def test_fedavg_errors():
    good = [{"w": np.zeros((2, 2), dtype=np.float32)}]
    bad = [{"w": np.zeros((2, 3), dtype=np.float32)}]
    with pytest.raises(ProtocolError):
        fedavg([good, bad], [1, 1])
    with pytest.raises(ProtocolError):
        fedavg([good, good], [0, 0])
    with pytest.raises(ProtocolError):
        fedavg([], [])


# ---------------------------------------------------------------------------
# device sampling


def test_sampling_full_participation_and_determinism():
    assert device_sampling(3, 5, 5, seed=0) == [0, 1, 2, 3, 4]
    assert device_sampling(7, 10, 4, seed=1) == device_sampling(7, 10, 4, seed=1)
    assert device_sampling(7, 10, 4, seed=1) != device_sampling(8, 10, 4, seed=1)
    with pytest.raises(ConfigError):
        device_sampling(0, 3, 4, seed=0)


def test_sampling_frequency_is_uniform():
    devices, per_round, rounds = 8, 3, 10000
    hits = np.zeros(devices)
    for r in range(rounds):
        for k in device_sampling(r, devices, per_round, seed=5):
            hits[k] += 1
    p = per_round / devices
    sigma = np.sqrt(p * (1 - p) / rounds)
    assert np.abs(hits / rounds - p).max() < 3 * sigma


def test_local_batches_cover_everything_once():
    idx = np.arange(50, 90)
    batches = local_batches(0, 1, 2, idx, 16)
    assert len(batches) == 3  # ceil(40 / 16)
    assert sorted(np.concatenate(batches)) == sorted(idx)


# ---------------------------------------------------------------------------
# early stopping


def test_early_stopper_halts_exactly_at_patience():
    stop = EarlyStopper(3)
    seq = [0.5, 0.6, 0.6, 0.6]
    assert [stop.update(a) for a in seq] == [False, False, False, False]
    assert stop.update(0.6) is True  # third consecutive non-improvement
    stop = EarlyStopper(2)
    assert [stop.update(a) for a in [0.5, 0.4, 0.6, 0.6]] == [False, False, False, False]
    assert stop.update(0.55) is True
    assert stop.best == 0.6


def test_engine_early_stopping_replays_exactly():
    part, val = _setup()
    cfg = _cfg(epochs_device=40, patience=3)
    report = run_fl(cfg, SPEC, part, val)
    stop = EarlyStopper(cfg.patience)
    stopped_at = None
    for i, rec in enumerate(report.epochs, start=1):
        if stop.update(rec.val_accuracy):
            stopped_at = i
            break
    assert stopped_at == len(report.epochs) < 40


# ---------------------------------------------------------------------------
# classic FL


def test_fl_single_device_equals_centralized_sgd_bitwise():
    part, val = _setup(devices=1)
    cfg = _cfg(devices=1, devices_per_round=1, epochs_device=3)
    report = run_fl(cfg, SPEC, part, val)

    # centralized oracle: plain SGD over the same batch streams, no aggregation
    model = build_model(SPEC, cfg.seed)
    ds = part.dataset
    for epoch in range(1, 4):
        for batch in local_batches(cfg.seed, 0, epoch, part.device_indices(0),
                                   cfg.batch_device):
            train_chain_batch([model], [cfg.lr_device], ds.x[batch], ds.y[batch])
    for got, want in zip(report.blocks["model"].params, model.params):
        for key in want:
            assert np.array_equal(got[key], want[key])


def test_fl_zero_epochs_leaves_initial_model():
    part, val = _setup()
    report = run_fl(_cfg(epochs_device=0), SPEC, part, val)
    init = build_model(SPEC, 2)
    for got, want in zip(report.blocks["model"].params, init.params):
        for key in want:
            assert np.array_equal(got[key], want[key])
    assert report.ledger.total_bytes() == 0
    assert report.epochs == []


def test_fl_ledger_is_two_model_transfers_per_device_epoch():
    part, val = _setup()
    cfg = _cfg(epochs_device=3, devices_per_round=3)
    report = run_fl(cfg, SPEC, part, val)
    full_bytes = param_bytes(build_model(SPEC, cfg.seed))
    assert report.ledger.total_bytes() == 2 * 3 * 3 * full_bytes


# ---------------------------------------------------------------------------
# split training


def test_sfl_matches_fl_when_learning_rates_agree():
    # same seed, same batches: staged backprop is exactly end-to-end backprop
    part, val = _setup()
    cfg = _cfg(epochs_device=3)
    fl = run_fl(cfg, SPEC, part, val)
    sfl = run_sfl(cfg, SPEC, part, val)
    recombined = sfl.blocks["device"].params + sfl.blocks["server"].params
    for got, want in zip(recombined, fl.blocks["model"].params):
        for key in want:
            assert np.allclose(got[key], want[key], atol=1e-6)
    assert abs(sfl.final_accuracy - fl.final_accuracy) <= 0.01


def test_sfl_ledger_matches_per_epoch_accounting():
    part, val = _setup()
    cfg = _cfg(epochs_device=2)
    report = run_sfl(cfg, SPEC, part, val)
    device_bytes = param_bytes(split_model(build_model(SPEC, cfg.seed), 1)[0])
    act_elems = int(np.prod(SPEC.shape_at(1)))
    expected = 0
    for _ in range(2):  # full participation: every device, every epoch
        for k in range(4):
            n_k = int(part.counts[k])
            expected += 2 * device_bytes
            expected += n_k * (4 * act_elems + 8)  # uplink activations + labels
            expected += n_k * 4 * act_elems        # downlink gradients
    assert report.ledger.total_bytes() == expected


def test_sfl_emits_one_gradient_entry_per_iteration():
    part, val = _setup()
    cfg = _cfg(epochs_device=2, batch_device=16)
    report = run_sfl(cfg, SPEC, part, val)
    iterations = 2 * sum(
        -(-int(part.counts[k]) // cfg.batch_device) for k in range(4)
    )
    counts = report.ledger.count_by_kind()
    assert counts["gradient"] == iterations
    assert counts["activation"] == iterations


def test_sfl_with_head_only_server_matches_fl_device_compute():
    part, val = _setup()
    p_last = SPEC.depth - 1  # server block is just the loss head
    cfg = _cfg(epochs_device=2, split_point=p_last)
    sfl = run_sfl(cfg, SPEC, part, val)
    fl = run_fl(_cfg(epochs_device=2), SPEC, part, val)
    assert sfl.device_flops == fl.device_flops
    assert sfl.server_flops == 0


# ---------------------------------------------------------------------------
# unidirectional inter-block training


def test_uit_never_ships_gradients():
    part, val = _setup()
    report = run_uit(_cfg(epochs_device=3, epochs_server=3), SPEC, part, val)
    counts = report.ledger.count_by_kind()
    assert counts["gradient"] == 0
    assert counts["activation"] == 4  # one one-shot stream per device


def test_uit_activation_bytes_once_regardless_of_server_epochs():
    # ~1000 training samples cross the link exactly once, whatever N_server is
    part, val = _setup(n=1112)
    assert part.dataset.n == 1001
    total = activation_bytes(SPEC, 1, part.dataset.n, include_labels=True)
    for epochs_server in (1, 5):
        report = run_uit(_cfg(epochs_device=2, epochs_server=epochs_server),
                         SPEC, part, val)
        assert report.ledger.bytes_by_kind()["activation"] == total


def test_uit_device_phase_comm_matches_closed_form():
    part, val = _setup()
    cfg = _cfg(epochs_device=3, epochs_server=1)
    report = run_uit(cfg, SPEC, part, val)
    device, server = split_model(build_model(SPEC, cfg.seed), 1)
    aux = generate_auxiliary(server, cfg.aux_ratio, SPEC.classes, cfg.seed)
    per_model = param_bytes(device) + param_bytes(aux)
    model_bytes = (report.ledger.bytes_by_kind()["model_up"]
                   + report.ledger.bytes_by_kind()["model_down"])
    assert model_bytes == 2 * 3 * 4 * per_model


def test_uit_total_matches_cost_model():
    part, val = _setup()
    cfg = _cfg(epochs_device=3, epochs_server=2)
    report = run_uit(cfg, SPEC, part, val)
    cm = CostModel.from_model(SPEC, part.dataset.n, include_labels=True)
    assert report.ledger.total_bytes() == closed_form_comm(cm, "uit", 1, 3, devices=4)


def test_uit_label_bytes_toggle():
    part, val = _setup()
    on = run_uit(_cfg(epochs_device=1, epochs_server=1), SPEC, part, val)
    off = run_uit(_cfg(epochs_device=1, epochs_server=1, include_label_bytes=False),
                  SPEC, part, val)
    diff = (on.ledger.bytes_by_kind()["activation"]
            - off.ledger.bytes_by_kind()["activation"])
    assert diff == 8 * part.dataset.n


def test_frozen_activations_regenerate_bit_identically():
    part, val = _setup()
    report = run_uit(_cfg(epochs_device=2, epochs_server=1), SPEC, part, val)
    device = report.blocks["device"]
    sets = [build_activation_set(device, part) for _ in range(3)]
    for other in sets[1:]:
        assert other.activations.tobytes() == sets[0].activations.tobytes()
        assert np.array_equal(other.labels, sets[0].labels)
        assert np.array_equal(other.device_ids, sets[0].device_ids)
    assert all(sets[0].complete.values())


def test_uit_cnn_activation_ledger_cross_check():
    # image model at p=1: one-shot stream bytes equal the size-accounting value
    spec = toy_cnn(classes=4)
    ds = make_synthetic(300, 4, "image-patches", spec.input_shape, seed=1)
    train, val = split_validation(ds, 0.1, 1)
    part = dirichlet_partition(train, 3, 0.5, seed=1)
    cfg = TrainingConfig(devices=3, devices_per_round=3, split_point=1,
                         epochs_device=1, epochs_server=1, patience=5, seed=1)
    report = run_uit(cfg, spec, part, val)
    assert report.ledger.bytes_by_kind()["activation"] == activation_bytes(spec, 1, train.n)


def test_uit_phases_are_marked_and_epochs_monotone():
    part, val = _setup()
    report = run_uit(_cfg(epochs_device=2, epochs_server=2), SPEC, part, val)
    phases = [rec.phase for rec in report.epochs]
    assert phases == ["device", "device", "transfer", "server", "server"]
    epochs = [rec.epoch for rec in report.epochs]
    assert epochs == sorted(epochs) and len(set(epochs)) == len(epochs)


def test_ablation_single_device_is_identical():
    part, val = _setup(devices=1)
    cfg = _cfg(devices=1, devices_per_round=1, epochs_device=2, epochs_server=3)
    a = run_uit(cfg, SPEC, part, val)
    b = run_uit_no_consolidation(cfg, SPEC, part, val)
    assert a.final_accuracy == b.final_accuracy
    for got, want in zip(b.blocks["server"].params, a.blocks["server"].params):
        for key in want:
            assert np.array_equal(got[key], want[key])


def test_ablation_ledger_identical_to_consolidated():
    part, val = _setup()
    cfg = _cfg(epochs_device=2, epochs_server=3)
    a = run_uit(cfg, SPEC, part, val)
    b = run_uit_no_consolidation(cfg, SPEC, part, val)
    assert a.ledger.entries == b.ledger.entries


def test_engines_share_init_and_partition_for_a_seed():
    part, val = _setup()
    cfg = _cfg(epochs_device=1, epochs_server=1)
    sfl = run_sfl(cfg, SPEC, part, val)
    uit = run_uit(cfg, SPEC, part, val)
    dev_sfl = split_model(build_model(SPEC, cfg.seed), 1)[0]
    # both engines started from the same device-block init
    for blocks in (sfl.blocks["device"], uit.blocks["device"]):
        assert blocks.spec is SPEC
    a, b = run_sfl(cfg, SPEC, part, val), run_sfl(cfg, SPEC, part, val)
    for got, want in zip(a.blocks["device"].params, b.blocks["device"].params):
        for key in want:
            assert np.array_equal(got[key], want[key])


def test_report_reconciles_with_ledger_and_flops():
    part, val = _setup()
    for engine in (run_fl, run_sfl, run_uit, run_uit_no_consolidation):
        report = engine(_cfg(epochs_device=2, epochs_server=2), SPEC, part, val)
        last = report.epochs[-1]
        by_dir = report.ledger.bytes_by_direction()
        assert last.cum_bytes_up == by_dir["up"]
        assert last.cum_bytes_down == by_dir["down"]
        assert last.cum_device_flops == report.device_flops_total
        assert last.cum_server_flops == report.server_flops
        assert last.sim_time_s == report.sim_time_s


def test_device_sampling_applies_when_m_less_than_k():
    part, val = _setup(devices=4)
    cfg = _cfg(devices_per_round=2, epochs_device=2, epochs_server=1)
    report = run_fl(cfg, SPEC, part, val)
    full_bytes = param_bytes(build_model(SPEC, cfg.seed))
    assert report.ledger.total_bytes() == 2 * 2 * 2 * full_bytes
    uit_all = run_uit(TrainingConfig(**{**cfg.__dict__, "uit_all_devices": True}),
                      SPEC, part, val)
    assert uit_all.ledger.count_by_kind()["model_up"] == 2 * 4  # all K train


def test_concurrent_transfer_is_accuracy_equivalent():
    part, val = _setup(n=600)
    cfg = _cfg(epochs_device=3, epochs_server=6)
    serial = run_uit(cfg, SPEC, part, val)
    overlapped = run_uit(TrainingConfig(**{**cfg.__dict__, "concurrent_transfer": True}),
                         SPEC, part, val)
    assert overlapped.ledger.entries == serial.ledger.entries
    assert overlapped.ledger.count_by_kind()["gradient"] == 0
    assert abs(overlapped.final_accuracy - serial.final_accuracy) <= 0.05


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(lr_device=-0.1).validate()
    with pytest.raises(ConfigError):
        _cfg(devices_per_round=9).validate()
    with pytest.raises(ConfigError):
        _cfg(patience=0).validate()
    part, val = _setup(devices=4)
    with pytest.raises(ConfigError):
        run_fl(_cfg(devices=5, devices_per_round=5), SPEC, part, val)
    with pytest.raises(ConfigError):
        run_sfl(_cfg(split_point=SPEC.depth), SPEC, part, val)


def test_evaluate_chain_chunking_is_consistent():
    part, val = _setup()
    model = build_model(SPEC, 0)
    a = evaluate_chain([model], val.x, val.y, chunk=7)
    b = evaluate_chain([model], val.x, val.y, chunk=256)
    assert a == b
