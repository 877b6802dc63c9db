"""Training engines for the three collaborative protocols plus one ablation.

* run_fl: every sampled device trains the full model locally; the server
  aggregates with sample-count-weighted averaging once per epoch.
* run_sfl: the model is cut at a split point; every iteration ships an
  activation batch up and a gradient batch down, device and server blocks are
  aggregated once per epoch (one server block per participating device).
* run_uit: unidirectional inter-block training. Devices first train the
  device block against a local auxiliary head (phase 1), then stream their
  frozen-block activations to the server exactly once (phase 2), and a single
  server block trains on the consolidated activation set (phase 3). No
  gradient ever travels server -> device.
* run_uit_no_consolidation: identical through phase 2, but phase 3 keeps one
  activation set and one server block per device, aggregated every epoch.

All engines are deterministic for a fixed seed and share rng streams for
model init, batching, and device sampling, so runs that differ only in the
protocol are directly comparable.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .comm import CommLedger, simulated_time
from .data import Dataset, Partition
from .errors import ConfigError, ProtocolError
from .models import (
    Block,
    ModelSpec,
    activation_elements,
    build_model,
    generate_auxiliary,
    param_bytes,
    split_model,
    BYTES_PER_LABEL,
)
from .nn import PASS_BOTH, PASS_FORWARD, loss_softmax_xent

PROTO_FL = "fl"
PROTO_SFL = "sfl"
PROTO_UIT = "uit"
PROTO_UIT_NOCONS = "uit-noconsolidation"

PHASE_TRAIN = "train"
PHASE_DEVICE = "device"
PHASE_TRANSFER = "transfer"
PHASE_SERVER = "server"

EVAL_CHUNK = 256
ACTIVATION_CHUNK = 256

_TAG_BATCH = 21
_TAG_SAMPLE = 22
_TAG_SERVER = 23


@dataclass(frozen=True)
class TrainingConfig:
    devices: int = 8                 # K
    devices_per_round: int = 8       # m, sampled uniformly without replacement
    split_point: int = 1             # p: layers [0, p) stay on the device
    aux_ratio: float = 0.5
    lr_device: float = 0.05
    lr_server: float = 0.05
    epochs_device: int = 30
    epochs_server: int = 30
    batch_device: int = 16
    batch_server: int = 32
    patience: int = 15
    alpha: float = 0.33
    epsilon: float = 1e-9
    seed: int = 0
    bandwidth_bps: float = 50e6
    include_label_bytes: bool = True
    uit_all_devices: bool = False     # phase 1 trains all K instead of sampling m
    concurrent_transfer: bool = False  # overlap phases 2 and 3

    def validate(self) -> "TrainingConfig":
        if self.devices < 1:
            raise ConfigError(f"need at least one device, got {self.devices}")
        if not 1 <= self.devices_per_round <= self.devices:
            raise ConfigError(
                f"devices_per_round must be in [1, {self.devices}], got {self.devices_per_round}"
            )
        if self.split_point < 1:
            raise ConfigError(f"split point must be >= 1, got {self.split_point}")
        if not 0.0 < self.aux_ratio <= 1.0:
            raise ConfigError(f"aux_ratio must be in (0, 1], got {self.aux_ratio}")
        if self.lr_device <= 0 or self.lr_server <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs_device < 0 or self.epochs_server < 0:
            raise ConfigError("epoch limits must be non-negative")
        if self.batch_device < 1 or self.batch_server < 1:
            raise ConfigError("batch sizes must be positive")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.bandwidth_bps <= 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth_bps}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_accuracy: float
    cum_bytes_up: int
    cum_bytes_down: int
    cum_device_flops: int
    cum_server_flops: int
    sim_time_s: float


@dataclass
class RunReport:
    protocol: str
    epochs: list[EpochRecord]
    final_accuracy: float
    device_phase_accuracy: float
    ledger: CommLedger
    device_flops: dict[int, int]
    server_flops: int
    sim_time_s: float
    device_epochs: int
    server_epochs: int
    blocks: dict[str, Block]

    @property
    def device_flops_total(self) -> int:
        return sum(self.device_flops.values())


@dataclass
class ActivationSet:
    """Consolidated frozen-block outputs with their labels and origin device."""

    activations: np.ndarray  # (n, *act_shape) float32
    labels: np.ndarray       # (n,)
    device_ids: np.ndarray   # (n,)
    complete: dict[int, bool] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def device_slice(self, k: int) -> np.ndarray:
        return np.where(self.device_ids == k)[0]


class EarlyStopper:
    """Stop when validation accuracy fails to improve `patience` epochs in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.bad = 0
        self.observed = 0

    def update(self, accuracy: float) -> bool:
        self.observed += 1
        if accuracy > self.best:
            self.best = accuracy
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


# ---------------------------------------------------------------------------
# shared machinery


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def device_sampling(round_index: int, devices: int, per_round: int, seed: int) -> list[int]:
    """Uniform sample without replacement, deterministic per (seed, round)."""
    if per_round > devices:
        raise ConfigError(f"cannot sample {per_round} of {devices} devices")
    if per_round == devices:
        return list(range(devices))
    rng = _rng(seed, _TAG_SAMPLE, round_index)
    picked = rng.choice(devices, size=per_round, replace=False)
    return sorted(int(i) for i in picked)


def local_batches(seed: int, device: int, epoch: int, indices: np.ndarray,
                  batch_size: int) -> list[np.ndarray]:
    """Shuffled minibatch index lists; ceil(n_k / B) batches, last one partial."""
    rng = _rng(seed, _TAG_BATCH, device, epoch)
    perm = rng.permutation(indices)
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def evaluate_chain(blocks: list[Block], x: np.ndarray, y: np.ndarray,
                   chunk: int = EVAL_CHUNK) -> float:
    """Accuracy of composed blocks (argmax of the logits entering the head)."""
    correct = 0
    for i in range(0, len(y), chunk):
        h = x[i : i + chunk]
        for b in blocks:
            h, _ = b.forward(h)
        correct += int((h.argmax(axis=1) == y[i : i + chunk]).sum())
    return correct / len(y)


def train_chain_batch(blocks: list[Block], lrs: list[float], xb: np.ndarray,
                      yb: np.ndarray) -> float:
    """One SGD step through a chain of blocks treated as a single model."""
    h = xb
    caches = []
    for b in blocks:
        h, c = b.forward(h)
        caches.append(c)
    loss, g = loss_softmax_xent(h, yb)
    for b, c, lr in reversed(list(zip(blocks, caches, lrs))):
        grads, g = b.backward(c, g)
        b.step(grads, lr)
    return loss


def fedavg(param_lists: list[list[dict]], weights) -> list[dict]:
    """Sample-count-weighted average of congruent parameter lists.

    Accumulates integer-weighted sums in float64 and divides once, so
    averaging identical models reproduces them bit for bit. Models are summed
    in list order; engines pass them in ascending device id.
    """
    weights = [float(w) for w in weights]
    if not param_lists:
        raise ProtocolError("nothing to aggregate")
    if len(param_lists) != len(weights):
        raise ProtocolError("one weight per model required")
    if any(w < 0 for w in weights) or sum(weights) == 0:
        raise ProtocolError("weights must be non-negative and not all zero")
    total = sum(weights)
    reference = param_lists[0]
    out: list[dict] = []
    for li, layer_ref in enumerate(reference):
        acc = {}
        for key, arr in layer_ref.items():
            acc[key] = np.zeros(arr.shape, dtype=np.float64)
        out.append(acc)
    for plist, w in zip(param_lists, weights):
        if len(plist) != len(reference):
            raise ProtocolError("models have different layer counts")
        for li, layer in enumerate(plist):
            for key, arr in layer.items():
                if arr.shape != out[li][key].shape:
                    raise ProtocolError(
                        f"parameter shape mismatch at layer {li} key {key!r}"
                    )
                out[li][key] += w * arr.astype(np.float64)
    dtype = next((a.dtype for p in reference for a in p.values()), np.float32)
    return [
        {key: (acc / total).astype(dtype) for key, acc in layer.items()}
        for layer in out
    ]


def generate_activations(device_block: Block, x: np.ndarray,
                         chunk: int = ACTIVATION_CHUNK) -> np.ndarray:
    """Forward samples through a frozen device block in fixed-size chunks.

    The chunking is part of the contract: repeating the call with the same
    parameters reproduces every activation bit for bit.
    """
    outs = []
    for i in range(0, len(x), chunk):
        h, _ = device_block.forward(x[i : i + chunk])
        outs.append(h)
    return np.concatenate(outs, axis=0)


def build_activation_set(device_block: Block, partition: Partition) -> ActivationSet:
    """All devices' frozen-block activations, in ascending device order."""
    ds = partition.dataset
    acts, labels, ids = [], [], []
    for k in range(partition.devices):
        idx = partition.device_indices(k)
        acts.append(generate_activations(device_block, ds.x[idx]))
        labels.append(ds.y[idx])
        ids.append(np.full(len(idx), k, dtype=np.int64))
    return ActivationSet(
        np.concatenate(acts, axis=0),
        np.concatenate(labels, axis=0),
        np.concatenate(ids, axis=0),
        complete={k: True for k in range(partition.devices)},
    )


class _RunState:
    """Mutable bookkeeping one engine run threads through its epochs."""

    def __init__(self, cfg: TrainingConfig):
        self.cfg = cfg
        self.ledger = CommLedger()
        self.device_flops: dict[int, int] = {k: 0 for k in range(cfg.devices)}
        self.server_flops = 0
        self.records: list[EpochRecord] = []
        self.epoch_index = 0

    def add_device_flops(self, device: int, flops: int) -> None:
        self.device_flops[device] += flops

    def snapshot(self, phase: str, train_loss: float, val_accuracy: float) -> None:
        self.epoch_index += 1
        by_dir = self.ledger.bytes_by_direction()
        self.records.append(
            EpochRecord(
                epoch=self.epoch_index,
                phase=phase,
                train_loss=train_loss,
                val_accuracy=val_accuracy,
                cum_bytes_up=by_dir["up"],
                cum_bytes_down=by_dir["down"],
                cum_device_flops=sum(self.device_flops.values()),
                cum_server_flops=self.server_flops,
                sim_time_s=simulated_time(self.ledger.total_bytes(), self.cfg.bandwidth_bps),
            )
        )

    def report(self, protocol: str, final_accuracy: float, blocks: dict[str, Block],
               device_phase_accuracy: float = math.nan, device_epochs: int = 0,
               server_epochs: int = 0) -> RunReport:
        return RunReport(
            protocol=protocol,
            epochs=self.records,
            final_accuracy=final_accuracy,
            device_phase_accuracy=device_phase_accuracy,
            ledger=self.ledger,
            device_flops=self.device_flops,
            server_flops=self.server_flops,
            sim_time_s=simulated_time(self.ledger.total_bytes(), self.cfg.bandwidth_bps),
            device_epochs=device_epochs,
            server_epochs=server_epochs,
            blocks=blocks,
        )


def _check_inputs(cfg: TrainingConfig, model: ModelSpec, partition: Partition,
                  val: Dataset) -> None:
    cfg.validate()
    if partition.devices != cfg.devices:
        raise ConfigError(
            f"config expects {cfg.devices} devices but partition has {partition.devices}"
        )
    if val.classes != model.classes:
        raise ConfigError("validation set class count does not match the model")
    if cfg.split_point >= model.depth:
        raise ConfigError(
            f"split point must satisfy 1 <= p < {model.depth}, got {cfg.split_point}"
        )


# ---------------------------------------------------------------------------
# classic federated averaging


def run_fl(cfg: TrainingConfig, model: ModelSpec, partition: Partition,
           val: Dataset) -> RunReport:
    _check_inputs(cfg, model, partition, val)
    ds = partition.dataset
    full = build_model(model, cfg.seed)
    full_bytes = param_bytes(full)
    state = _RunState(cfg)
    stop = EarlyStopper(cfg.patience)
    epochs_run = 0

    for epoch in range(1, cfg.epochs_device + 1):
        selected = device_sampling(epoch, cfg.devices, cfg.devices_per_round, cfg.seed)
        states, weights, losses = [], [], []
        for k in selected:
            local = full.copy()
            for batch in local_batches(cfg.seed, k, epoch, partition.device_indices(k),
                                       cfg.batch_device):
                losses.append(train_chain_batch([local], [cfg.lr_device],
                                                ds.x[batch], ds.y[batch]))
                state.add_device_flops(k, local.flops(len(batch), PASS_BOTH))
            state.ledger.record("up", "model_up", full_bytes, epoch, k)
            states.append(local.params)
            weights.append(partition.counts[k])
        full.params = fedavg(states, weights)
        for k in selected:
            state.ledger.record("down", "model_down", full_bytes, epoch, k)
        acc = evaluate_chain([full], val.x, val.y)
        state.snapshot(PHASE_TRAIN, float(np.mean(losses)), acc)
        epochs_run = epoch
        if stop.update(acc):
            break

    final = stop.best if stop.observed else evaluate_chain([full], val.x, val.y)
    return state.report(PROTO_FL, final, {"model": full}, device_epochs=epochs_run)


# ---------------------------------------------------------------------------
# split training with per-iteration activation/gradient exchange


def run_sfl(cfg: TrainingConfig, model: ModelSpec, partition: Partition,
            val: Dataset) -> RunReport:
    _check_inputs(cfg, model, partition, val)
    ds = partition.dataset
    device_g, server_g = split_model(build_model(model, cfg.seed), cfg.split_point)
    device_bytes = param_bytes(device_g)
    act_elems = activation_elements(model, cfg.split_point)
    label_bytes = BYTES_PER_LABEL if cfg.include_label_bytes else 0
    state = _RunState(cfg)
    stop = EarlyStopper(cfg.patience)
    epochs_run = 0

    for epoch in range(1, cfg.epochs_device + 1):
        selected = device_sampling(epoch, cfg.devices, cfg.devices_per_round, cfg.seed)
        dev_states, srv_states, weights, losses = [], [], [], []
        for k in selected:
            dev = device_g.copy()
            srv = server_g.copy()
            for batch in local_batches(cfg.seed, k, epoch, partition.device_indices(k),
                                       cfg.batch_device):
                xb, yb = ds.x[batch], ds.y[batch]
                acts, dev_cache = dev.forward(xb)
                state.ledger.record("up", "activation",
                                    len(batch) * (4 * act_elems + label_bytes), epoch, k)
                logits, srv_cache = srv.forward(acts)
                loss, g = loss_softmax_xent(logits, yb)
                srv_grads, g_acts = srv.backward(srv_cache, g)
                srv.step(srv_grads, cfg.lr_server)
                state.ledger.record("down", "gradient", len(batch) * 4 * act_elems,
                                    epoch, k)
                dev_grads, _ = dev.backward(dev_cache, g_acts)
                dev.step(dev_grads, cfg.lr_device)
                losses.append(loss)
                state.add_device_flops(k, dev.flops(len(batch), PASS_BOTH))
                state.server_flops += srv.flops(len(batch), PASS_BOTH)
            state.ledger.record("up", "model_up", device_bytes, epoch, k)
            dev_states.append(dev.params)
            srv_states.append(srv.params)
            weights.append(partition.counts[k])
        device_g.params = fedavg(dev_states, weights)
        server_g.params = fedavg(srv_states, weights)
        for k in selected:
            state.ledger.record("down", "model_down", device_bytes, epoch, k)
        acc = evaluate_chain([device_g, server_g], val.x, val.y)
        state.snapshot(PHASE_TRAIN, float(np.mean(losses)), acc)
        epochs_run = epoch
        if stop.update(acc):
            break

    final = stop.best if stop.observed else evaluate_chain([device_g, server_g], val.x, val.y)
    return state.report(PROTO_SFL, final, {"device": device_g, "server": server_g},
                        device_epochs=epochs_run)


# ---------------------------------------------------------------------------
# unidirectional inter-block training


def run_uit(cfg: TrainingConfig, model: ModelSpec, partition: Partition,
            val: Dataset) -> RunReport:
    return _run_uit(cfg, model, partition, val, consolidate=True)


def run_uit_no_consolidation(cfg: TrainingConfig, model: ModelSpec,
                             partition: Partition, val: Dataset) -> RunReport:
    """Ablation: one activation set and one server block per device, aggregated
    every epoch instead of training a single block on the unified set."""
    return _run_uit(cfg, model, partition, val, consolidate=False)


def _run_uit(cfg: TrainingConfig, model: ModelSpec, partition: Partition,
             val: Dataset, consolidate: bool) -> RunReport:
    _check_inputs(cfg, model, partition, val)
    ds = partition.dataset
    device_g, server_init = split_model(build_model(model, cfg.seed), cfg.split_point)
    aux_g = generate_auxiliary(server_init, cfg.aux_ratio, model.classes, cfg.seed)
    upload_bytes = param_bytes(device_g) + param_bytes(aux_g)
    act_elems = activation_elements(model, cfg.split_point)
    label_bytes = BYTES_PER_LABEL if cfg.include_label_bytes else 0
    state = _RunState(cfg)

    # Phase 1: local training against the auxiliary head; both blocks travel
    # for aggregation, gradients never do.
    stop = EarlyStopper(cfg.patience)
    device_epochs = 0
    for epoch in range(1, cfg.epochs_device + 1):
        if cfg.uit_all_devices:
            selected = list(range(cfg.devices))
        else:
            selected = device_sampling(epoch, cfg.devices, cfg.devices_per_round, cfg.seed)
        dev_states, aux_states, weights, losses = [], [], [], []
        for k in selected:
            dev = device_g.copy()
            aux = aux_g.copy()
            for batch in local_batches(cfg.seed, k, epoch, partition.device_indices(k),
                                       cfg.batch_device):
                losses.append(train_chain_batch([dev, aux], [cfg.lr_device, cfg.lr_device],
                                                ds.x[batch], ds.y[batch]))
                state.add_device_flops(
                    k, dev.flops(len(batch), PASS_BOTH) + aux.flops(len(batch), PASS_BOTH)
                )
            state.ledger.record("up", "model_up", upload_bytes, epoch, k)
            dev_states.append(dev.params)
            aux_states.append(aux.params)
            weights.append(partition.counts[k])
        device_g.params = fedavg(dev_states, weights)
        aux_g.params = fedavg(aux_states, weights)
        for k in selected:
            state.ledger.record("down", "model_down", upload_bytes, epoch, k)
        acc = evaluate_chain([device_g, aux_g], val.x, val.y)
        state.snapshot(PHASE_DEVICE, float(np.mean(losses)), acc)
        device_epochs = epoch
        if stop.update(acc):
            break
    device_phase_acc = (stop.best if stop.observed
                        else evaluate_chain([device_g, aux_g], val.x, val.y))

    # Phases 2 and 3: one-shot activation transfer, then server-only training.
    transfer_round = device_epochs + 1
    if cfg.concurrent_transfer:
        final, act_set, server_g, server_epochs = _transfer_and_train_concurrent(
            state, cfg, partition, device_g, server_init, val, consolidate,
            transfer_round, act_elems, label_bytes)
    else:
        act_set = build_activation_set(device_g, partition)
        for k in range(partition.devices):
            n_k = int(partition.counts[k])
            state.add_device_flops(k, device_g.flops(n_k, PASS_FORWARD))
            state.ledger.record("up", "activation",
                                n_k * (4 * act_elems + label_bytes), transfer_round, k)
        state.snapshot(PHASE_TRANSFER, math.nan,
                       evaluate_chain([device_g, server_init], val.x, val.y))
        final, server_g, server_epochs = _server_phase(
            state, cfg, server_init, act_set, device_g, partition, val, consolidate)

    protocol = PROTO_UIT if consolidate else PROTO_UIT_NOCONS
    blocks = {"device": device_g, "aux": aux_g, "server": server_g}
    return state.report(protocol, final, blocks,
                        device_phase_accuracy=device_phase_acc,
                        device_epochs=device_epochs, server_epochs=server_epochs)


def _server_groups(act_set: ActivationSet, partition: Partition, consolidate: bool):
    if consolidate:
        return [np.arange(act_set.n)], [act_set.n]
    groups = [act_set.device_slice(k) for k in range(partition.devices)]
    return groups, [len(g) for g in groups]


def _server_phase(state: _RunState, cfg: TrainingConfig, server_init: Block,
                  act_set: ActivationSet, device_block: Block, partition: Partition,
                  val: Dataset, consolidate: bool, start_epoch: int = 1,
                  stop: EarlyStopper | None = None,
                  aggregated: Block | None = None):
    """Train one server block per activation group with per-epoch aggregation.

    The consolidated variant is the single-group case, so both variants share
    this code path (aggregating one block is an exact no-op).
    """
    groups, weights = _server_groups(act_set, partition, consolidate)
    aggregated = aggregated if aggregated is not None else server_init.copy()
    stop = stop if stop is not None else EarlyStopper(cfg.patience)
    epochs_run = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs_server + 1):
        losses = []
        trained = []
        for gi, group in enumerate(groups):
            blk = aggregated.copy()
            for batch in _server_batches(cfg, gi, epoch, group):
                losses.append(train_chain_batch([blk], [cfg.lr_server],
                                                act_set.activations[batch],
                                                act_set.labels[batch]))
                state.server_flops += blk.flops(len(batch), PASS_BOTH)
            trained.append(blk.params)
        aggregated.params = fedavg(trained, weights)
        acc = evaluate_chain([device_block, aggregated], val.x, val.y)
        state.snapshot(PHASE_SERVER, float(np.mean(losses)) if losses else math.nan, acc)
        epochs_run = epoch
        if stop.update(acc):
            break
    final = (stop.best if stop.observed
             else evaluate_chain([device_block, aggregated], val.x, val.y))
    return final, aggregated, epochs_run


def _server_batches(cfg: TrainingConfig, group_index: int, epoch: int,
                    indices: np.ndarray) -> list[np.ndarray]:
    rng = _rng(cfg.seed, _TAG_SERVER, group_index, epoch)
    perm = rng.permutation(indices)
    return [perm[i : i + cfg.batch_server] for i in range(0, len(perm), cfg.batch_server)]


def _transfer_and_train_concurrent(state: _RunState, cfg: TrainingConfig,
                                   partition: Partition, device_g: Block,
                                   server_init: Block, val: Dataset,
                                   consolidate: bool, transfer_round: int,
                                   act_elems: int, label_bytes: int):
    """Overlap the one-shot activation stream with the first server epoch.

    A producer thread forwards each device's data through the frozen device
    block and funnels batch-sized chunks through an ordered queue; the
    consumer starts fitting as soon as the first chunk lands. Later epochs run
    on the full stored set, so results are accuracy-equivalent to the serial
    path though batch order in epoch one differs.
    """
    ds = partition.dataset
    chunk_queue: queue.Queue = queue.Queue()

    def producer():
        for k in range(partition.devices):
            idx = partition.device_indices(k)
            acts = generate_activations(device_g, ds.x[idx])
            state.add_device_flops(k, device_g.flops(len(idx), PASS_FORWARD))
            state.ledger.record("up", "activation",
                                len(idx) * (4 * act_elems + label_bytes),
                                transfer_round, k)
            for i in range(0, len(idx), cfg.batch_server):
                chunk_queue.put((acts[i : i + cfg.batch_server],
                                 ds.y[idx[i : i + cfg.batch_server]], k))
        chunk_queue.put(None)

    thread = threading.Thread(target=producer, name="activation-stream")
    thread.start()

    # Epoch 1 trains on chunks in arrival order while the stream is live.
    groups_n = 1 if consolidate else partition.devices
    blocks = [server_init.copy() for _ in range(groups_n)]
    losses = []
    stored_x, stored_y, stored_ids = [], [], []
    complete: dict[int, bool] = {}
    trained_any = cfg.epochs_server >= 1
    while True:
        item = chunk_queue.get()
        if item is None:
            break
        xb, yb, k = item
        stored_x.append(xb)
        stored_y.append(yb)
        stored_ids.append(np.full(len(yb), k, dtype=np.int64))
        complete[k] = True
        if trained_any:
            blk = blocks[0 if consolidate else k]
            losses.append(train_chain_batch([blk], [cfg.lr_server], xb, yb))
            state.server_flops += blk.flops(len(yb), PASS_BOTH)
    thread.join()

    act_set = ActivationSet(np.concatenate(stored_x, axis=0),
                            np.concatenate(stored_y, axis=0),
                            np.concatenate(stored_ids, axis=0),
                            complete=complete)
    state.snapshot(PHASE_TRANSFER, math.nan,
                   evaluate_chain([device_g, server_init], val.x, val.y))

    if not trained_any:
        final = evaluate_chain([device_g, server_init], val.x, val.y)
        return final, act_set, server_init.copy(), 0

    _, weights = _server_groups(act_set, partition, consolidate)
    aggregated = server_init.copy()
    aggregated.params = fedavg([b.params for b in blocks], weights)
    stop = EarlyStopper(cfg.patience)
    acc = evaluate_chain([device_g, aggregated], val.x, val.y)
    state.snapshot(PHASE_SERVER, float(np.mean(losses)) if losses else math.nan, acc)
    stopped = stop.update(acc)
    if stopped or cfg.epochs_server == 1:
        return stop.best, act_set, aggregated, 1

    final, aggregated, server_epochs = _server_phase(
        state, cfg, server_init, act_set, device_g, partition, val, consolidate,
        start_epoch=2, stop=stop, aggregated=aggregated)
    return final, act_set, aggregated, server_epochs


ENGINES = {
    PROTO_FL: run_fl,
    PROTO_SFL: run_sfl,
    PROTO_UIT: run_uit,
    PROTO_UIT_NOCONS: run_uit_no_consolidation,
}
