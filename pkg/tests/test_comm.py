"""Ledger bookkeeping, closed-form cost formulas, and the time model."""

import numpy as np
import pytest

from splitsim.comm import (
    CommLedger,
    CostModel,
    closed_form_comm,
    comm_difference_vs_fl,
    fl_crossover_epochs,
    fl_uit_difference,
    simulated_time,
)
from splitsim.data import dirichlet_partition, make_synthetic, split_validation
from splitsim.errors import ConfigError, UsageError
from splitsim.models import toy_cnn, toy_mlp
from splitsim.protocols import TrainingConfig, run_fl, run_sfl, run_uit


def test_ledger_totals():
    ledger = CommLedger()
    assert ledger.total_bytes() == 0 and ledger.rounds() == 0
    ledger.record("up", "activation", 10, 1, 0)
    ledger.record("down", "gradient", 10, 1, 0)
    assert ledger.total_bytes() == 20
    assert ledger.rounds() == 2
    by_kind = ledger.bytes_by_kind()
    assert sum(by_kind.values()) == ledger.total_bytes()
    assert ledger.bytes_by_direction() == {"up": 10, "down": 10}
    assert ledger.bytes_by_device() == {0: 20}


def test_ledger_rejects_bad_records():
    ledger = CommLedger()
    with pytest.raises(UsageError):
        ledger.record("up", "activation", 0, 1, 0)
    with pytest.raises(UsageError):
        ledger.record("sideways", "activation", 1, 1, 0)
    with pytest.raises(UsageError):
        ledger.record("up", "weights", 1, 1, 0)


def test_ledger_csv_schema(tmp_path):
    ledger = CommLedger()
    ledger.record("up", "model_up", 123, 1, 2)
    ledger.record("down", "model_down", 456, 1, 2)
    path = tmp_path / "ledger.csv"
    ledger.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "round,device,direction,kind,bytes"
    assert lines[1] == "1,2,up,model_up,123"


# ---------------------------------------------------------------------------
# closed-form formulas


def test_zero_epoch_one_shot_cost_is_the_activation_stream():
    cm = CostModel.from_model(toy_mlp(), 100)
    assert closed_form_comm(cm, "uit", 1, 0) == cm.activation_stream_bytes(1)


def test_unknown_variant_rejected():
    cm = CostModel.from_model(toy_mlp(), 100)
    with pytest.raises(UsageError):
        closed_form_comm(cm, "pipelined", 1, 1)


def test_sfl_minus_uit_identity_without_labels():
    # with the label toggle off, gradients and activations weigh the same and
    # the difference collapses to (2N-1)*act - 2N*aux
    cm = CostModel.from_model(toy_cnn(), 200, include_labels=False)
    for n_epochs in (1, 3, 10):
        diff = (closed_form_comm(cm, "sfl", 1, n_epochs)
                - closed_form_comm(cm, "uit", 1, n_epochs))
        act = cm.activation_stream_bytes(1)
        aux = cm.aux_bytes(1)
        assert diff == (2 * n_epochs - 1) * act - 2 * n_epochs * aux
        assert diff > 0  # act >> aux on the toy models


def test_fl_difference_root_and_degenerate_cases():
    assert fl_uit_difference(1000, 100, 3600, epochs=2.0) == 0.0
    assert fl_uit_difference(500, 500, 1234, epochs=7) == -1234  # aux as big as server
    cm = CostModel.from_model(toy_cnn(), 256)
    root = cm.activation_stream_bytes(1) / (2 * (cm.server_bytes(1) - cm.aux_bytes(1)))
    assert comm_difference_vs_fl(cm, 1, root) == pytest.approx(0.0, abs=1e-6)


def test_fl_crossover_is_the_first_positive_epoch():
    cm = CostModel.from_model(toy_cnn(), 256)
    n0 = fl_crossover_epochs(cm, 1)
    assert n0 is not None and n0 >= 1
    assert comm_difference_vs_fl(cm, 1, n0) > 0
    if n0 > 1:
        assert comm_difference_vs_fl(cm, 1, n0 - 1) <= 0
    # the difference grows linearly in the epoch count from there on
    diffs = [comm_difference_vs_fl(cm, 1, n) for n in range(n0, n0 + 5)]
    assert all(b > a for a, b in zip(diffs, diffs[1:]))


def test_uit_cost_column_non_decreasing_in_split_point():
    for spec in (toy_cnn(), toy_mlp()):
        cm = CostModel.from_model(spec, 256)
        costs = [closed_form_comm(cm, "uit", p, 100)
                 for p in range(1, spec.depth) if cm.aux_defined(p)]
        assert len(costs) >= 2
        assert all(b >= a for a, b in zip(costs, costs[1:]))


# ---------------------------------------------------------------------------
# time model and round counts


def test_simulated_time_arithmetic():
    assert simulated_time(6_250_000, 50e6) == 1.0  # 6.25 MB at 50 Mbps
    assert simulated_time(0, 50e6) == 0.0
    with pytest.raises(ConfigError):
        simulated_time(10, 0.0)


def test_simulated_time_is_additive_and_linear():
    rng = np.random.default_rng(0)
    parts = rng.integers(1, 10_000, size=20)
    total = simulated_time(int(parts.sum()), 8e6)
    assert total == pytest.approx(sum(simulated_time(int(p), 8e6) for p in parts))
    assert simulated_time(300, 8e6) == pytest.approx(3 * simulated_time(100, 8e6))


def test_round_count_ratio_sfl_vs_uit():
    spec = toy_mlp(classes=4, input_dim=8, hidden=(10, 10))
    ds = make_synthetic(3000, 4, "gaussian-blobs", (8,), seed=6)
    train, val = split_validation(ds, 0.1, 6)
    part = dirichlet_partition(train, 4, 0.5, seed=6)
    cfg = TrainingConfig(devices=4, devices_per_round=4, split_point=1,
                         epochs_device=2, epochs_server=1, batch_device=4,
                         patience=10, seed=6)
    rounds = {}
    for name, engine in (("fl", run_fl), ("sfl", run_sfl), ("uit", run_uit)):
        rounds[name] = engine(cfg, spec, part, val).ledger.rounds()
    # at strictly equal epoch counts the one-shot streams add exactly K entries
    assert rounds["uit"] == rounds["fl"] + 4
    assert rounds["sfl"] > rounds["fl"]
    assert rounds["sfl"] >= 100 * rounds["uit"]


def test_round_count_ordering_at_convergence():
    # with early stopping the device phase ends before full-model training does,
    # so the per-iteration > full-model >= one-shot ordering emerges
    spec = toy_mlp(classes=6, input_dim=12, hidden=(16, 16))
    ds = make_synthetic(1200, 6, "gaussian-blobs", (12,), seed=0, spread=3.0)
    train, val = split_validation(ds, 0.1, 0)
    part = dirichlet_partition(train, 8, 0.33, seed=0)
    cfg = TrainingConfig(devices=8, devices_per_round=8, split_point=1,
                         lr_device=0.1, lr_server=0.1, epochs_device=25,
                         epochs_server=25, batch_device=16, batch_server=32,
                         patience=8, alpha=0.33, seed=0)
    rounds = {}
    for name, engine in (("fl", run_fl), ("sfl", run_sfl), ("uit", run_uit)):
        rounds[name] = engine(cfg, spec, part, val).ledger.rounds()
    assert rounds["sfl"] > rounds["fl"] >= rounds["uit"]


def test_ledger_counters_match_entry_sums():
    ledger = CommLedger()
    rng = np.random.default_rng(3)
    for i in range(50):
        ledger.record("up" if i % 2 else "down",
                      ("model_up", "model_down", "activation", "gradient")[i % 4],
                      int(rng.integers(1, 1000)), i, int(rng.integers(0, 4)))
    assert ledger.total_bytes() == sum(e.nbytes for e in ledger.entries)
    assert ledger.rounds() == len(ledger.entries) == 50
