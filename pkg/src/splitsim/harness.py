"""Experiment orchestration: config files, sweeps, metrics CSVs, summary JSON.

Config files are flat text with dotted keys (`key = value`, `#` comments).
List-valued keys take whitespace-separated entries. A plan is the cross
product protocols x alphas x seeds; each cell trains once per seed and the
summary reports mean/sample-std accuracy plus communication and compute
totals per cell. Re-running a plan reproduces every output file byte for
byte.
"""

from __future__ import annotations

import csv
import json
import math
import traceback
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DEFAULT_EPSILON, dirichlet_partition, make_synthetic, split_validation, KINDS
from .errors import ConfigError
from .models import MODEL_PRESETS, ModelSpec
from .protocols import ENGINES, RunReport, TrainingConfig

METRICS_HEADER = (
    "protocol", "alpha", "seed", "epoch", "phase", "loss", "val_accuracy",
    "cum_bytes_up", "cum_bytes_down", "cum_device_flops", "cum_server_flops",
    "sim_time_s",
)


@dataclass(frozen=True)
class DataConfig:
    kind: str = "gaussian-blobs"
    n: int = 2000
    spread: float = 4.0
    noise: float = 1.0
    val_fraction: float = 0.1


@dataclass(frozen=True)
class RunSpec:
    protocol: str
    alpha: float
    seed: int
    cfg: TrainingConfig
    model: ModelSpec
    data: DataConfig

    @property
    def cell(self) -> str:
        return f"{self.protocol}@alpha={self.alpha:g}"

    @property
    def run_name(self) -> str:
        return f"{self.protocol}_alpha{self.alpha:g}_seed{self.seed}"


@dataclass
class ExperimentPlan:
    runs: list[RunSpec]
    out_dir: Path
    name: str = "plan"


# ---------------------------------------------------------------------------
# config file parsing


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {raw!r}")


def _parse_shape(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.lower().split("x"))


_SCALARS = {
    "out_dir": str,
    "name": str,
    "model": str,
    "model.classes": int,
    "model.input": _parse_shape,
    "model.dense": int,
    "data": str,
    "data.n": int,
    "data.spread": float,
    "data.noise": float,
    "data.val_fraction": float,
    "train.devices": int,
    "train.devices_per_round": int,
    "train.split": int,
    "train.aux_ratio": float,
    "train.lr_device": float,
    "train.lr_server": float,
    "train.epochs_device": int,
    "train.epochs_server": int,
    "train.batch_device": int,
    "train.batch_server": int,
    "train.patience": int,
    "train.epsilon": float,
    "train.bandwidth_mbps": float,
    "train.label_bytes": _parse_bool,
    "train.uit_all_devices": _parse_bool,
    "train.concurrent_phase3": _parse_bool,
}

_LISTS = {
    "protocols": str,
    "alphas": float,
    "seeds": int,
    "model.hidden": int,
    "model.widths": int,
}

_DEFAULTS = {
    "out_dir": "runs",
    "name": "plan",
    "model": "toy-mlp",
    "model.classes": 5,
    "model.input": None,          # preset default when omitted
    "model.hidden": [24, 24],
    "model.widths": [6, 12],
    "model.dense": 32,
    "data": "gaussian-blobs",
    "data.n": 2000,
    "data.spread": 4.0,
    "data.noise": 1.0,
    "data.val_fraction": 0.1,
    "protocols": ["uit"],
    "alphas": [0.33],
    "seeds": [0],
    "train.devices": 8,
    "train.devices_per_round": 8,
    "train.split": 1,
    "train.aux_ratio": 0.5,
    "train.lr_device": 0.05,
    "train.lr_server": 0.05,
    "train.epochs_device": 30,
    "train.epochs_server": 30,
    "train.batch_device": 16,
    "train.batch_server": 32,
    "train.patience": 15,
    "train.epsilon": DEFAULT_EPSILON,
    "train.bandwidth_mbps": 50.0,
    "train.label_bytes": True,
    "train.uit_all_devices": False,
    "train.concurrent_phase3": False,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse dotted-key lines into a value dict; unknown keys are rejected."""
    values = dict(_DEFAULTS)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, rhs = line.partition("=")
        key = key.strip()
        rhs = rhs.strip()
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            if key in _SCALARS:
                values[key] = _SCALARS[key](rhs)
            elif key in _LISTS:
                parts = rhs.split()
                values[key] = [_LISTS[key](part) for part in parts]
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def _build_model(values: dict) -> ModelSpec:
    preset = values["model"]
    if preset not in MODEL_PRESETS:
        raise ConfigError(f"unknown model {preset!r}; choose from {sorted(MODEL_PRESETS)}")
    classes = values["model.classes"]
    if preset == "toy-mlp":
        shape = values["model.input"] or (16,)
        if len(shape) != 1:
            raise ConfigError(f"toy-mlp takes a flat input, got shape {shape}")
        return MODEL_PRESETS[preset](classes=classes, input_dim=shape[0],
                                     hidden=tuple(values["model.hidden"]))
    shape = values["model.input"] or (1, 8, 8)
    if len(shape) != 3:
        raise ConfigError(f"toy-cnn takes a CxHxW input, got shape {shape}")
    widths = values["model.widths"]
    if len(widths) != 2:
        raise ConfigError(f"toy-cnn takes exactly two conv widths, got {widths}")
    return MODEL_PRESETS[preset](classes=classes, input_shape=shape,
                                 widths=tuple(widths), hidden=values["model.dense"])


def plan_from_values(values: dict) -> ExperimentPlan:
    model = _build_model(values)
    if values["data"] not in KINDS:
        raise ConfigError(f"unknown dataset kind {values['data']!r}; choose from {KINDS}")
    data = DataConfig(kind=values["data"], n=values["data.n"],
                      spread=values["data.spread"], noise=values["data.noise"],
                      val_fraction=values["data.val_fraction"])
    base_cfg = TrainingConfig(
        devices=values["train.devices"],
        devices_per_round=values["train.devices_per_round"],
        split_point=values["train.split"],
        aux_ratio=values["train.aux_ratio"],
        lr_device=values["train.lr_device"],
        lr_server=values["train.lr_server"],
        epochs_device=values["train.epochs_device"],
        epochs_server=values["train.epochs_server"],
        batch_device=values["train.batch_device"],
        batch_server=values["train.batch_server"],
        patience=values["train.patience"],
        epsilon=values["train.epsilon"],
        bandwidth_bps=values["train.bandwidth_mbps"] * 1e6,
        include_label_bytes=values["train.label_bytes"],
        uit_all_devices=values["train.uit_all_devices"],
        concurrent_transfer=values["train.concurrent_phase3"],
    )
    seeds = values["seeds"]
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct within a sweep, got {seeds}")
    runs = []
    for protocol in values["protocols"]:
        if protocol not in ENGINES:
            raise ConfigError(f"unknown protocol {protocol!r}; choose from {sorted(ENGINES)}")
        for alpha in values["alphas"]:
            for seed in seeds:
                cfg = replace(base_cfg, alpha=alpha, seed=seed).validate()
                runs.append(RunSpec(protocol, alpha, seed, cfg, model, data))
    return ExperimentPlan(runs=runs, out_dir=Path(values["out_dir"]), name=values["name"])


def load_config(path) -> ExperimentPlan:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return plan_from_values(parse_config_text(path.read_text(), source=str(path)))


# ---------------------------------------------------------------------------
# execution


def execute_run(rs: RunSpec) -> RunReport:
    """Build data, partition, and model for one cell/seed and train it."""
    ds = make_synthetic(rs.data.n, rs.model.classes, rs.data.kind,
                        rs.model.input_shape, seed=rs.seed,
                        spread=rs.data.spread, noise=rs.data.noise)
    train, val = split_validation(ds, rs.data.val_fraction, rs.seed)
    part = dirichlet_partition(train, rs.cfg.devices, rs.alpha, rs.cfg.epsilon, rs.seed)
    return ENGINES[rs.protocol](rs.cfg, rs.model, part, val)


def metrics_rows(rs: RunSpec, report: RunReport) -> list[list]:
    rows = []
    for rec in report.epochs:
        rows.append([
            rs.protocol,
            f"{rs.alpha:g}",
            rs.seed,
            rec.epoch,
            rec.phase,
            "" if math.isnan(rec.train_loss) else f"{rec.train_loss:.6f}",
            f"{rec.val_accuracy:.6f}",
            rec.cum_bytes_up,
            rec.cum_bytes_down,
            rec.cum_device_flops,
            rec.cum_server_flops,
            f"{rec.sim_time_s:.9f}",
        ])
    return rows


def write_metrics_csv(path, rs: RunSpec, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        writer.writerows(metrics_rows(rs, report))


def _cell_summary(cell_runs: list[tuple[RunSpec, RunReport]]) -> dict:
    rs0 = cell_runs[0][0]
    accs = np.array([rep.final_accuracy for _, rep in cell_runs], dtype=float)
    std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
    return {
        "cell": rs0.cell,
        "protocol": rs0.protocol,
        "alpha": rs0.alpha,
        "seeds": [rs.seed for rs, _ in cell_runs],
        "acc_mean": round(float(accs.mean()), 6),
        "acc_std": round(std, 6),
        "bytes_total": float(np.mean([rep.ledger.total_bytes() for _, rep in cell_runs])),
        "rounds_total": float(np.mean([rep.ledger.rounds() for _, rep in cell_runs])),
        "device_flops": float(np.mean([rep.device_flops_total for _, rep in cell_runs])),
        "server_flops": float(np.mean([rep.server_flops for _, rep in cell_runs])),
        "sim_time_s": round(float(np.mean([rep.sim_time_s for _, rep in cell_runs])), 9),
    }


def run_plan(plan: ExperimentPlan, out_dir=None) -> tuple[dict, int]:
    """Execute every run in the plan; failures are recorded, not fatal.

    Returns (summary, failure_count) and writes one metrics CSV per run plus
    summary.json under the output directory.
    """
    out = Path(out_dir) if out_dir is not None else plan.out_dir
    out.mkdir(parents=True, exist_ok=True)
    by_cell: dict[str, list[tuple[RunSpec, RunReport]]] = {}
    failures = []
    for rs in plan.runs:
        try:
            report = execute_run(rs)
        except Exception as exc:  # keep sweeping even if one cell blows up
            failures.append({
                "run": rs.run_name,
                "error": f"{type(exc).__name__}: {exc}",
                "trace": traceback.format_exc(limit=3),
            })
            continue
        write_metrics_csv(out / f"{rs.run_name}.csv", rs, report)
        by_cell.setdefault(rs.cell, []).append((rs, report))

    summary = {
        "plan": plan.name,
        "runs": len(plan.runs),
        "cells": [_cell_summary(cell_runs) for cell_runs in by_cell.values()],
        "failures": failures,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary, len(failures)
