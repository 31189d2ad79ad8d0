"""Experiment configuration, the partition -> balance -> train pipeline, and
the three-axis ablation grid.

Configs are plain key=value files with [section] headers (stdlib configparser
syntax), chosen so a 45-cell grid stays auditable as text. Every file a run
writes is a deterministic function of (config, seed); wall-clock timing is
only recorded when explicitly enabled.
"""

from __future__ import annotations

import configparser
import csv
import itertools
import math
import os
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import datasets, noisegen, serialization, training
from .datasets import ClientDataset, PartitionSpec
from .mixing import DpMixConfig, WeightMode
from .protocol import (NaturalNoiseSource, ProtocolTrace, Responder, SupplyPolicy,
                       Topology, plan_deficits, run_balance)
from .seeding import derive_seed, rng_for
from .training import TrainConfig, build_model, init_model, run_round


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    dataset: str = "toy"                 # toy | mnist | cifar10
    data_path: str = ""
    subset_per_class: int = 0            # 0 = use everything
    toy_classes: int = 10
    toy_per_class: int = 100
    toy_test_per_class: int = 50
    toy_dims: tuple[int, int, int] = (12, 12, 1)
    toy_jitter: int = 16
    # partition
    scheme: str = "class_skew"           # class_skew | dirichlet
    classes_per_client: int = 1
    concentration: float = 0.5
    num_clients: int = 10
    # balance
    supplement_pct: float = 0.0
    mix_fraction: float = 0.75
    k: int = 4
    sigma: float = 50.0
    deadline: int = 2
    capacity_fraction: float = 1.0
    topology: str = "star"               # "star" or an edge list "0-1,1-2"
    rebalance_every: int = 0
    # natural noise generator
    noise_base_resolution: int = 4
    noise_channels: int = 8
    noise_bank: str = "oriented_gabor"
    noise_leaky_slope: float = 0.2
    # training
    model: str = "cnn"
    rounds: int = 50
    batch_size: int = 128
    local_epochs: int = 1
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    participation_fraction: float = 1.0
    # run
    seed: int = 0
    timing: bool = False
    # grid axes (used by run_grid; empty = inherit the single value above)
    grid_classes_per_client: tuple[int, ...] = ()
    grid_supplement_pct: tuple[float, ...] = ()
    grid_mix_fraction: tuple[float, ...] = ()
    # fixed dataset stream shared by all grid cells; None = follow `seed`
    data_seed: int | None = None

    def validate(self) -> None:
        if self.dataset not in ("toy", "mnist", "cifar10"):
            raise ConfigError(f"dataset must be toy/mnist/cifar10, got {self.dataset!r}")
        if self.dataset != "toy" and not self.data_path:
            raise ConfigError(f"dataset {self.dataset} needs a path")
        if self.scheme not in ("class_skew", "dirichlet"):
            raise ConfigError(f"scheme must be class_skew/dirichlet, got {self.scheme!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not (0.0 <= self.supplement_pct <= 100.0):
            raise ConfigError(f"supplement_pct must be in [0, 100], got {self.supplement_pct}")
        if not (0.0 <= self.mix_fraction <= 1.0):
            raise ConfigError(f"mix_fraction must be in [0, 1], got {self.mix_fraction}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ConfigError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.deadline < 1:
            raise ConfigError(f"deadline must be >= 1, got {self.deadline}")
        if not (0.0 <= self.capacity_fraction <= 1.0):
            raise ConfigError("capacity_fraction must be in [0, 1]")
        if self.model not in ("logreg", "mlp", "cnn"):
            raise ConfigError(f"model must be logreg/mlp/cnn, got {self.model!r}")
        if self.rounds < 1 or self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigError("rounds, batch_size, local_epochs must be >= 1")
        if not (0.0 < self.participation_fraction <= 1.0):
            raise ConfigError("participation_fraction must be in (0, 1]")
        _parse_topology(self.topology)  # raises ConfigError on bad syntax


def _parse_topology(text: str) -> Topology:
    text = text.strip()
    if text == "star":
        return Topology.star()
    edges = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.split("-")
        if len(pieces) != 2:
            raise ConfigError(f"bad topology edge {part!r}; expected 'a-b'")
        try:
            edges.append((int(pieces[0]), int(pieces[1])))
        except ValueError as exc:
            raise ConfigError(f"bad topology edge {part!r}") from exc
    if not edges:
        raise ConfigError(f"topology must be 'star' or an edge list, got {text!r}")
    return Topology.peers(edges)


_SECTIONS = {
    "dataset": {"kind": ("dataset", str), "path": ("data_path", str),
                "subset_per_class": ("subset_per_class", int),
                "toy_classes": ("toy_classes", int),
                "toy_per_class": ("toy_per_class", int),
                "toy_test_per_class": ("toy_test_per_class", int),
                "toy_dims": ("toy_dims", "dims"),
                "toy_jitter": ("toy_jitter", int)},
    "partition": {"scheme": ("scheme", str),
                  "classes_per_client": ("classes_per_client", int),
                  "concentration": ("concentration", float),
                  "num_clients": ("num_clients", int)},
    "balance": {"supplement_pct": ("supplement_pct", float),
                "mix_fraction": ("mix_fraction", float),
                "k": ("k", int), "sigma": ("sigma", float),
                "deadline": ("deadline", int),
                "capacity_fraction": ("capacity_fraction", float),
                "topology": ("topology", str),
                "rebalance_every": ("rebalance_every", int)},
    "noise": {"base_resolution": ("noise_base_resolution", int),
              "channels_per_scale": ("noise_channels", int),
              "wavelet_bank": ("noise_bank", str),
              "leaky_slope": ("noise_leaky_slope", float)},
    "train": {"model": ("model", str), "rounds": ("rounds", int),
              "batch_size": ("batch_size", int),
              "local_epochs": ("local_epochs", int),
              "lr": ("lr", float), "beta1": ("beta1", float),
              "beta2": ("beta2", float), "eps": ("eps", float),
              "participation_fraction": ("participation_fraction", float)},
    "run": {"seed": ("seed", int), "timing": ("timing", "bool")},
    "grid": {"classes_per_client": ("grid_classes_per_client", "int_list"),
             "supplement_pct": ("grid_supplement_pct", "float_list"),
             "mix_fraction": ("grid_mix_fraction", "float_list")},
}


def _convert(raw: str, kind):
    if kind is str:
        return raw.strip()
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "bool":
        value = raw.strip().lower()
        if value in ("true", "yes", "1", "on"):
            return True
        if value in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "dims":
        parts = raw.lower().replace(" ", "").split("x")
        if len(parts) != 3:
            raise ValueError(f"dims must look like HxWxCh, got {raw!r}")
        return tuple(int(p) for p in parts)
    if kind == "int_list":
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if kind == "float_list":
        return tuple(float(p) for p in raw.split(",") if p.strip())
    raise ValueError(f"unknown kind {kind!r}")


def load_config(path: str, seed_override: int | None = None) -> ExperimentConfig:
    """Parse a key=value config file into a validated ExperimentConfig."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        known = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            attr, kind = known[key]
            try:
                values[attr] = _convert(raw, kind)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    cfg = ExperimentConfig(**values)
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    cfg.validate()
    return cfg


def load_dataset(cfg: ExperimentConfig) -> tuple[list, list, tuple[int, int, int], int]:
    """Returns (train, test, dims, num_classes) for the configured dataset."""
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.dataset == "toy":
        train = datasets.make_toy_dataset(cfg.toy_per_class, cfg.toy_classes,
                                          cfg.toy_dims, derive_seed(data_seed, "toy-train"),
                                          jitter=cfg.toy_jitter)
        test = datasets.make_toy_dataset(cfg.toy_test_per_class, cfg.toy_classes,
                                         cfg.toy_dims, derive_seed(data_seed, "toy-test"),
                                         jitter=cfg.toy_jitter)
        return train, test, cfg.toy_dims, cfg.toy_classes
    if cfg.dataset == "mnist":
        train, test = datasets.load_mnist_dir(cfg.data_path)
        dims, num_classes = (28, 28, 1), 10
    else:
        train, test = datasets.load_cifar10_dir(cfg.data_path)
        dims, num_classes = (32, 32, 3), 10
    if cfg.subset_per_class > 0:
        train = _stratified_subset(train, cfg.subset_per_class, num_classes,
                                   rng_for(data_seed, "subset"))
    return train, test, dims, num_classes


def _stratified_subset(examples: list, per_class: int, num_classes: int,
                       rng: np.random.Generator) -> list:
    by_label: list[list[int]] = [[] for _ in range(num_classes)]
    for i, ex in enumerate(examples):
        by_label[ex.label].append(i)
    chosen: list[int] = []
    for label in range(num_classes):
        idxs = by_label[label]
        take = min(per_class, len(idxs))
        pick = rng.choice(len(idxs), size=take, replace=False)
        chosen.extend(idxs[i] for i in sorted(pick))
    return [examples[i] for i in chosen]


def build_partition_spec(cfg: ExperimentConfig) -> PartitionSpec:
    seed = derive_seed(cfg.seed, "partition")
    if cfg.scheme == "class_skew":
        return PartitionSpec.class_skew(cfg.classes_per_client, cfg.num_clients, seed)
    return PartitionSpec.dirichlet(cfg.concentration, cfg.num_clients, seed)


def balance_clients(clients: Sequence[ClientDataset], cfg: ExperimentConfig,
                    dims: tuple[int, int, int],
                    trace: ProtocolTrace | None = None) -> dict[int, np.ndarray]:
    """Run the balance protocol for every client against pre-balance snapshots.

    Responders always serve from the datasets as they stood before any client
    balanced, so outcomes do not depend on the order clients run in and
    pseudo-images never become mixup sources. Returns each client's target
    vector (used again by the rebalance hook).
    """
    mix_cfg = DpMixConfig(cfg.k, cfg.sigma, WeightMode.DOMINANT_UNIFORM)
    policy = SupplyPolicy(capacity_fraction=cfg.capacity_fraction)
    topology = _parse_topology(cfg.topology)
    snapshots = {c.client_id: Responder(c.snapshot(), policy, mix_cfg) for c in clients}
    targets: dict[int, np.ndarray] = {}
    for client in clients:
        peak = int(client.label_histogram.max())
        target = math.ceil(cfg.supplement_pct / 100.0 * peak)
        targets[client.client_id] = np.full(client.num_classes, target, dtype=np.float64)
        deficits = plan_deficits(client, targets[client.client_id])
        if not deficits:
            continue
        gen_cfg = noisegen.GeneratorConfig(
            out_dims=dims, base_resolution=cfg.noise_base_resolution,
            channels_per_scale=cfg.noise_channels,
            leaky_slope=cfg.noise_leaky_slope,
            wavelet_bank=noisegen.WaveletBank(cfg.noise_bank),
            seed=derive_seed(cfg.seed, "noise-state", client.client_id))
        nat = NaturalNoiseSource(noisegen.init_generator(gen_cfg),
                                 derive_seed(cfg.seed, "natgen", client.client_id))
        peers = {cid: resp for cid, resp in snapshots.items() if cid != client.client_id}
        run_balance(client, deficits, cfg.mix_fraction, topology, peers, nat,
                    rng_for(cfg.seed, "balance", client.client_id),
                    deadline=cfg.deadline, trace=trace)
    return targets


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list
    final_accuracy: float
    best_accuracy: float
    tag: str
    out_dir: str | None = None


def config_tag(cfg: ExperimentConfig, num_classes: int) -> str:
    if cfg.scheme == "class_skew" and cfg.classes_per_client == num_classes:
        return "IID"
    if cfg.supplement_pct == 0:
        return "No Supplement"
    mix = round(cfg.mix_fraction * 100)
    return (f"{mix}% Mixup/ {100 - mix}% Natural "
            f"({_fmt_num(cfg.supplement_pct)}% Supplement)")


def _fmt_num(value) -> str:
    if float(value) == int(value):
        return str(int(value))
    return repr(float(value))


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> ExperimentResult:
    """Full pipeline: load, partition, balance, train; write CSVs when out_dir set."""
    cfg.validate()
    train, test, dims, num_classes = load_dataset(cfg)
    clients = datasets.partition(train, build_partition_spec(cfg))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        datasets.write_partition_manifest(
            clients, os.path.join(out_dir, "partition_manifest.csv"))

    trace = ProtocolTrace()
    targets: dict[int, np.ndarray] = {}
    if cfg.supplement_pct > 0:
        targets = balance_clients(clients, cfg, dims, trace)
        if out_dir:
            datasets.write_partition_manifest(
                clients, os.path.join(out_dir, "balance_manifest.csv"))
            trace.write_csv(os.path.join(out_dir, "trace.csv"))

    schema = build_model(cfg.model, dims, num_classes)
    params = init_model(schema, derive_seed(cfg.seed, "model-init"))
    train_cfg = TrainConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.batch_size,
                            cfg.local_epochs, cfg.participation_fraction, cfg.seed)
    train_clients = [training.training_arrays(c) for c in clients]
    test_x = np.stack([ex.pixels for ex in test]).astype(np.float32) / 255.0
    test_y = np.array([ex.label for ex in test], dtype=np.int64)

    reports = []
    rows = []
    for round_index in range(cfg.rounds):
        if (cfg.rebalance_every > 0 and round_index > 0
                and round_index % cfg.rebalance_every == 0 and targets):
            sizes = [len(c) for c in clients]
            for client in clients:
                deficits = plan_deficits(client, targets[client.client_id])
                if deficits:
                    balance_clients([client], cfg, dims, trace)
            if [len(c) for c in clients] != sizes:
                train_clients = [training.training_arrays(c) for c in clients]
        started = time.perf_counter()
        params, report = run_round(params, train_clients, test_x, test_y,
                                   train_cfg, round_index)
        elapsed = time.perf_counter() - started
        reports.append(report)
        row = [report.round_index, f"{report.test_accuracy:.6f}",
               f"{report.mean_train_loss:.6f}"]
        if cfg.timing:
            row.append(f"{elapsed:.3f}")
        rows.append(row)

    final_acc = reports[-1].test_accuracy
    best_acc = max(r.test_accuracy for r in reports)
    tag = config_tag(cfg, num_classes)
    if out_dir:
        header = ["round", "global_test_acc", "mean_train_loss"]
        if cfg.timing:
            header.append("seconds")
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        _write_summary(os.path.join(out_dir, "summary.csv"), cfg, tag,
                       final_acc, best_acc)
        serialization.save_checkpoint(os.path.join(out_dir, "model.ckpt"), params)
    return ExperimentResult(cfg, reports, final_acc, best_acc, tag, out_dir)


_SUMMARY_FIELDS = ["dataset", "model", "scheme", "classes_per_client",
                   "concentration", "num_clients", "supplement_pct",
                   "mix_fraction", "k", "sigma", "rounds", "seed", "tag",
                   "final_accuracy", "best_accuracy"]


def _write_summary(path: str, cfg: ExperimentConfig, tag: str,
                   final_acc: float, best_acc: float) -> None:
    row = [cfg.dataset, cfg.model, cfg.scheme, cfg.classes_per_client,
           _fmt_num(cfg.concentration), cfg.num_clients,
           _fmt_num(cfg.supplement_pct), _fmt_num(cfg.mix_fraction),
           cfg.k, _fmt_num(cfg.sigma), cfg.rounds, cfg.seed, tag,
           f"{final_acc:.6f}", f"{best_acc:.6f}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SUMMARY_FIELDS)
        writer.writerow(row)


def grid_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """Cross-product of the grid axes; each cell gets a derived seed and the
    shared dataset stream of the base seed."""
    c_values = cfg.grid_classes_per_client or (cfg.classes_per_client,)
    s_values = cfg.grid_supplement_pct or (cfg.supplement_pct,)
    m_values = cfg.grid_mix_fraction or (cfg.mix_fraction,)
    cells = []
    for c, sup, mix in itertools.product(c_values, s_values, m_values):
        tag = f"C={c};sup={_fmt_num(sup)};mix={_fmt_num(mix)}"
        cells.append(replace(
            cfg, classes_per_client=c, supplement_pct=sup, mix_fraction=mix,
            seed=derive_seed(cfg.seed, tag), data_seed=cfg.seed,
            grid_classes_per_client=(), grid_supplement_pct=(),
            grid_mix_fraction=()))
    return cells


def cell_dirname(cell: ExperimentConfig) -> str:
    return (f"C{cell.classes_per_client}_sup{_fmt_num(cell.supplement_pct)}"
            f"_mix{_fmt_num(cell.mix_fraction)}")


def run_grid(cfg: ExperimentConfig, out_dir: str) -> str:
    """Run every grid cell (skipping cells whose summary already exists) and
    assemble the grid summary CSV. Returns the summary path."""
    cells = grid_cells(cfg)
    cells_dir = os.path.join(out_dir, "cells")
    os.makedirs(cells_dir, exist_ok=True)
    for cell in cells:
        cell_dir = os.path.join(cells_dir, cell_dirname(cell))
        if os.path.exists(os.path.join(cell_dir, "summary.csv")):
            continue
        run_experiment(cell, cell_dir)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SUMMARY_FIELDS)
        for cell in cells:
            cell_summary = os.path.join(cells_dir, cell_dirname(cell), "summary.csv")
            with open(cell_summary, newline="") as cell_fh:
                rows = list(csv.reader(cell_fh))
            writer.writerow(rows[1])
    return summary_path
