"""Experiment configuration and the batch runner behind ``hflight run``."""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from hflight import analytics
from hflight.data import DirichletSplitConfig, LabeledDataset, federated_split, load_csv, load_idx, synth_blobs
from hflight.dataplane import SharedFileConnector, wall_clock_offset_ns
from hflight.model import ModelSpec, TrainConfig
from hflight.runtime import LocalLauncher, default_store, run_async_fl, run_sync_hfl, straggler_durations
from hflight.strategy import STRATEGIES, strategy_from_name
from hflight.topology import Topology, balanced_tree, load_yaml, two_tier


class ConfigError(ValueError):
    pass


OUTPUT_FILES = ("rounds.jsonl", "ledger.csv", "cost_report.json", "metrics.json")


@dataclass
class ExperimentConfig:
    seed: int
    tree: tuple[int, int] | None = None
    topo: str | None = None
    workers: int | None = None
    strategy: str = "fedavg"
    mu: float = 0.01
    beta: float = 0.5
    participation: float = 1.0
    model: str = "mlp"
    hidden: tuple[int, ...] = (32,)
    data: str = "synth"
    images: str | None = None
    labels: str | None = None
    csv: str | None = None
    classes: int = 4
    dims: int = 8
    per_class: int = 100
    spread: float = 1.0
    alpha_samples: float = 3.0
    alpha_labels: float = 1.0
    num_samples: int | None = None
    rounds: int = 5
    learning_rate: float = 0.01
    epochs: int = 1
    batch_size: int = 32
    launcher: str = "threads"
    slots: int = 4
    out: str = "hflight-out"
    straggler_base: float = 0.0
    straggler_factor: float = 5.0
    eval_stride: int = 1

    def __post_init__(self):
        if self.tree is not None:
            self.tree = tuple(int(v) for v in self.tree)
        self.hidden = tuple(int(v) for v in self.hidden)

    def check(self) -> None:
        """Raise ConfigError for anything that would fail before training starts."""
        sources = [s for s in (self.tree, self.topo, self.workers) if s is not None]
        if len(sources) != 1:
            raise ConfigError("give exactly one topology source: --tree, --topo or --workers")
        if self.tree is not None and (len(self.tree) != 2 or min(self.tree) < 1):
            raise ConfigError("--tree takes branching,height with both >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.data not in ("synth", "idx", "csv"):
            raise ConfigError(f"unknown data source {self.data!r}")
        if self.launcher not in ("threads", "processes"):
            raise ConfigError(f"unknown launcher mode {self.launcher!r}")
        if self.rounds < 1 or self.slots < 1:
            raise ConfigError("rounds and slots must be >= 1")
        paths = {"topo": self.topo}
        if self.data == "idx":
            paths.update(images=self.images, labels=self.labels)
        if self.data == "csv":
            paths["csv"] = self.csv
        for name, p in paths.items():
            if (name != "topo" or p is not None) and (p is None or not Path(p).exists()):
                raise ConfigError(f"--{name} path {p!r} does not exist")

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("topo", "images", "labels", "csv"):
            if d[key] is not None:
                d[key] = str(Path(d[key]).resolve())
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "seed" not in raw:
            raise ConfigError("config must set a seed")
        return cls(**raw)


def build_topology(cfg: ExperimentConfig) -> Topology:
    if cfg.tree is not None:
        return balanced_tree(*cfg.tree)[0]
    if cfg.topo is not None:
        return load_yaml(cfg.topo)
    return two_tier(cfg.workers)


def build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.data == "idx":
        return load_idx(cfg.images, cfg.labels)
    if cfg.data == "csv":
        return load_csv(cfg.csv)
    if cfg.model == "tinynet":
        return synth_blobs(2, 1, cfg.per_class, cfg.spread, cfg.seed)
    return synth_blobs(cfg.classes, cfg.dims, cfg.per_class, cfg.spread, cfg.seed)


def build_model(cfg: ExperimentConfig, data: LabeledDataset) -> ModelSpec:
    if cfg.model == "tinynet":
        return ModelSpec.tinynet()
    if cfg.model == "linear":
        return ModelSpec.linear(data.n_features, data.n_classes)
    if cfg.model in ("mlp", "smallmlp"):
        return ModelSpec.mlp(data.n_features, data.n_classes, cfg.hidden)
    raise ConfigError(f"unknown model {cfg.model!r}")


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("HFLIGHT_OUT") or cfg.out)


def prepare(cfg: ExperimentConfig):
    """Validate the config and build topology, data, model and strategy."""
    cfg.check()
    topo = build_topology(cfg)
    strategy = strategy_from_name(cfg.strategy, mu=cfg.mu, beta=cfg.beta, participation=cfg.participation)
    if strategy.is_async and not topo.is_two_tier():
        raise ConfigError("async requires two-tier topology")
    data = build_dataset(cfg)
    model = build_model(cfg, data)
    split = DirichletSplitConfig(cfg.alpha_samples, cfg.alpha_labels, cfg.seed)
    subsets = federated_split(data, topo.workers, split, cfg.num_samples)
    return topo, strategy, model, subsets


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one experiment and write its output files; returns the metrics dict."""
    topo, strategy, model, subsets = prepare(cfg)
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    (out / "subsets.json").write_text(subsets.to_json() + "\n")

    train = TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.seed)
    launcher = LocalLauncher(cfg.launcher, cfg.slots)
    store = default_store(launcher, topo)
    durations = None
    if cfg.straggler_base > 0:
        durations = straggler_durations(topo.workers, cfg.rounds, cfg.straggler_base, cfg.straggler_factor, cfg.seed)

    offset = wall_clock_offset_ns()
    kwargs = dict(train=train, seed=cfg.seed, store=store, durations=durations)
    try:
        if strategy.is_async:
            records = run_async_fl(
                topo, strategy, model, subsets, cfg.rounds, launcher, eval_stride=cfg.eval_stride, **kwargs
            )
        else:
            records = run_sync_hfl(topo, strategy, model, subsets, cfg.rounds, launcher, **kwargs)
    finally:
        if isinstance(store.connector, SharedFileConnector):
            shutil.rmtree(store.connector.run_dir, ignore_errors=True)

    with open(out / "rounds.jsonl", "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    with open(out / "timings.jsonl", "w") as fh:
        for rec in records:
            for row in rec.timing_rows(offset):
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "ledger.csv").write_text(store.ledger.to_csv(offset))

    cp = topo.comm_params(model.byte_size)
    report = analytics.comm_cost(cp)
    per_round = [store.ledger.total_bytes(round=r.round) for r in records]
    cost = {
        "params": asdict(cp),
        "model": report.to_dict(),
        "ledger_payload_bytes_per_round": per_round,
        "ledger_header_bytes_total": store.ledger.total_bytes(include_headers=True) - store.ledger.total_bytes(),
        "round0_residual_bytes": analytics.verify_ledger_against_model(store.ledger, cp, round=0)
        if not strategy.is_async
        else None,
    }
    (out / "cost_report.json").write_text(json.dumps(cost, indent=2, sort_keys=True) + "\n")

    sched = analytics.schedule_metrics(records)
    last = records[-1].metrics
    metrics = {
        "strategy": strategy.name,
        "records": len(records),
        "final": last.to_dict(),
        "schedule": sched.to_dict(),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics
