"""Byte-exact communication ledger, bandwidth/time model, and closed-form costs.

The ledger records payload bytes only (no protocol/header overhead) so that
simulated transfers can be compared byte-for-byte against the closed-form
volume formulas. One ledger entry is one communication round: a model upload
or download, one batch of activations or gradients, or one device's one-shot
activation stream.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

from .errors import ConfigError, UsageError
from .models import (
    ModelSpec,
    activation_bytes,
    activation_elements,
    build_model,
    generate_auxiliary,
    layer_param_bytes,
    param_bytes,
    split_model,
    BYTES_PER_ELEMENT,
)

DIRECTIONS = ("up", "down")
KINDS = ("model_up", "model_down", "activation", "gradient")

VARIANT_UIT = "uit"
VARIANT_SFL = "sfl"
VARIANT_FL = "fl"
VARIANTS = (VARIANT_UIT, VARIANT_SFL, VARIANT_FL)

CSV_HEADER = ("round", "device", "direction", "kind", "bytes")


@dataclass(frozen=True)
class CommEntry:
    round: int
    device: int
    direction: str
    kind: str
    nbytes: int


class CommLedger:
    """Append-only transfer log with O(1) running totals."""

    def __init__(self):
        self._entries: list[CommEntry] = []
        self._lock = threading.Lock()
        self._by_kind = {k: 0 for k in KINDS}
        self._by_direction = {d: 0 for d in DIRECTIONS}
        self._count_by_kind = {k: 0 for k in KINDS}
        self._by_device: dict[int, int] = {}

    def record(self, direction: str, kind: str, nbytes: int, round_index: int,
               device: int) -> None:
        if direction not in DIRECTIONS:
            raise UsageError(f"unknown direction {direction!r}")
        if kind not in KINDS:
            raise UsageError(f"unknown transfer kind {kind!r}")
        nbytes = int(nbytes)
        if nbytes <= 0:
            raise UsageError(f"transfer must carry at least one byte, got {nbytes}")
        entry = CommEntry(int(round_index), int(device), direction, kind, nbytes)
        with self._lock:
            self._entries.append(entry)
            self._by_kind[kind] += nbytes
            self._by_direction[direction] += nbytes
            self._count_by_kind[kind] += 1
            self._by_device[entry.device] = self._by_device.get(entry.device, 0) + nbytes

    @property
    def entries(self) -> tuple[CommEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def total_bytes(self) -> int:
        with self._lock:
            return sum(self._by_kind.values())

    def bytes_by_kind(self) -> dict[str, int]:
        with self._lock:
            return dict(self._by_kind)

    def bytes_by_direction(self) -> dict[str, int]:
        with self._lock:
            return dict(self._by_direction)

    def bytes_by_device(self) -> dict[int, int]:
        with self._lock:
            return dict(self._by_device)

    def count_by_kind(self) -> dict[str, int]:
        with self._lock:
            return dict(self._count_by_kind)

    def rounds(self) -> int:
        """Number of communication rounds = number of ledger entries."""
        with self._lock:
            return len(self._entries)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for e in self.entries:
                writer.writerow([e.round, e.device, e.direction, e.kind, e.nbytes])


# ---------------------------------------------------------------------------
# closed-form cost model


@dataclass(frozen=True)
class CostModel:
    """Per-layer sizes of one model plus the dataset scale.

    All sizes are derived from the model geometry via the split/aux machinery,
    never entered by hand, so the formulas and the simulation share one source
    of truth for what a block or an activation weighs on the wire.
    """

    spec: ModelSpec
    n_samples: int
    include_labels: bool = True
    aux_ratio: float = 0.5
    layer_bytes: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "layer_bytes", tuple(layer_param_bytes(self.spec)))

    @classmethod
    def from_model(cls, spec: ModelSpec, n_samples: int, include_labels: bool = True,
                   aux_ratio: float = 0.5) -> "CostModel":
        return cls(spec, n_samples, include_labels, aux_ratio)

    def device_bytes(self, p: int) -> int:
        return sum(self.layer_bytes[:p])

    def server_bytes(self, p: int) -> int:
        return sum(self.layer_bytes[p:])

    def aux_bytes(self, p: int) -> int:
        """Auxiliary head size at split p, measured on a freshly built head."""
        _, server = split_model(build_model(self.spec, 0), p)
        aux = generate_auxiliary(server, self.aux_ratio, self.spec.classes, 0)
        return param_bytes(aux)

    def aux_defined(self, p: int) -> bool:
        try:
            self.aux_bytes(p)
            return True
        except ConfigError:
            return False

    def activation_stream_bytes(self, p: int) -> int:
        """Uplink activations for the whole dataset (labels ride along if enabled)."""
        return activation_bytes(self.spec, p, self.n_samples, self.include_labels)

    def gradient_stream_bytes(self, p: int) -> int:
        """Downlink gradients for the whole dataset; gradients never carry labels."""
        return BYTES_PER_ELEMENT * activation_elements(self.spec, p) * self.n_samples


def closed_form_comm(cm: CostModel, variant: str, p: int, epochs: int,
                     devices: int = 1) -> int:
    """Total payload bytes a full simulated run moves, computed in closed form.

    `devices` is the participating-device count per epoch. The per-epoch
    activation/gradient streams cover the whole dataset, which matches the
    simulation exactly under full participation.
    """
    if epochs < 0:
        raise UsageError(f"epoch count must be non-negative, got {epochs}")
    if devices < 1:
        raise UsageError(f"device count must be positive, got {devices}")
    v = variant.lower()
    if v == VARIANT_UIT:
        model_term = 2 * epochs * devices * (cm.device_bytes(p) + cm.aux_bytes(p))
        return model_term + cm.activation_stream_bytes(p)
    if v == VARIANT_SFL:
        model_term = 2 * epochs * devices * cm.device_bytes(p)
        streams = epochs * (cm.activation_stream_bytes(p) + cm.gradient_stream_bytes(p))
        return model_term + streams
    if v == VARIANT_FL:
        return 2 * epochs * devices * (cm.device_bytes(p) + cm.server_bytes(p))
    raise UsageError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def fl_uit_difference(server_bytes: int, aux_bytes: int, act_bytes: int,
                      epochs: float, devices: int = 1) -> float:
    """2N*(server - aux) - one_shot_activations; positive means the one-shot
    scheme is cheaper than exchanging full models."""
    return 2.0 * epochs * devices * (server_bytes - aux_bytes) - act_bytes


def comm_difference_vs_fl(cm: CostModel, p: int, epochs: float, devices: int = 1) -> float:
    """Full-model-exchange cost minus one-shot-transfer cost; sign is the caller's."""
    return fl_uit_difference(cm.server_bytes(p), cm.aux_bytes(p),
                             cm.activation_stream_bytes(p), epochs, devices)


def fl_crossover_epochs(cm: CostModel, p: int, devices: int = 1) -> int | None:
    """Smallest epoch count from which the one-shot scheme beats full-model
    exchange, or None when the auxiliary head outweighs the server block."""
    gap = cm.server_bytes(p) - cm.aux_bytes(p)
    if gap <= 0:
        return None
    n = 1
    while comm_difference_vs_fl(cm, p, n, devices) <= 0:
        n += 1
    return n


def simulated_time(nbytes: int, bandwidth_bps: float) -> float:
    """Serial transfer time in seconds: 8 * bytes / bandwidth."""
    if bandwidth_bps <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth_bps}")
    return 8.0 * nbytes / bandwidth_bps
