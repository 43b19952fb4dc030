"""Experiment harness: scenario assembly, training loops, runs on disk.

A scenario is described by one flat :class:`ExperimentConfig`.  All
randomness derives from ``master_seed`` through named sub-seeds (data
synthesis, partitioning, model init, SGD batching, participation), so two
runs that differ only in aggregator see byte-identical data, initial models,
and batch schedules.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import federation, learner
from .data import Dataset, NoiseSpec, PartitionPlan, inject_noise, load_binary, load_csv, partition, synth_blobs
from .errors import ConfigurationError, InvalidInputError, RoundError, TrainingDivergenceError
from .federation import (
    ClientState,
    CredReport,
    MessageRecord,
    ServerState,
    fedavg_round,
    focus_round,
    init_server,
)
from .learner import ArchSpec, ModelParams, SgdConfig

AGGREGATORS = ("focus", "fedavg", "local_baseline")

METRICS_CSV_HEADER = "round,accuracy,fl_loss"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs, in flat key=value form.

    Synthetic data is the default source; ``dataset_file`` (CSV or the binary
    container) overrides it, in which case the class count and feature width
    come from the file.  ``noise`` lists label corruptions applied to client
    shards after partitioning.
    """

    # data source
    num_classes: int = 4
    samples_per_class: int = 300
    dim: int = 8
    separation: float = 3.0
    dataset_file: Optional[str] = None
    # partitioning
    num_clients: int = 4
    benchmark_fraction: float = 0.2
    test_fraction: float = 1.0 / 6.0
    client_proportions: Optional[Tuple[float, ...]] = None
    # label noise
    noise: Tuple[NoiseSpec, ...] = ()
    # model and local optimizer
    hidden_dims: Tuple[int, ...] = (64,)
    learning_rate: float = 0.5
    local_steps: int = 50
    batch_size: Union[int, str] = "full"
    # protocol
    aggregator: str = "focus"
    rounds: int = 50
    alpha: float = 1.0
    reduction: str = "mean"
    standardize_e: bool = True
    participation_fraction: float = 1.0
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "noise", tuple(self.noise))
        if self.client_proportions is not None:
            object.__setattr__(
                self, "client_proportions", tuple(float(p) for p in self.client_proportions)
            )
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if int(self.rounds) != self.rounds or self.rounds < 1:
            raise ConfigurationError(f"rounds must be an integer >= 1, got {self.rounds}")
        if not (0.0 < self.participation_fraction <= 1.0):
            raise ConfigurationError(
                f"participation_fraction must lie in (0, 1], got {self.participation_fraction}"
            )
        if int(self.master_seed) != self.master_seed or self.master_seed < 0:
            raise ConfigurationError(f"master_seed must be a non-negative integer, got {self.master_seed}")
        if any(not isinstance(ns, NoiseSpec) for ns in self.noise):
            raise ConfigurationError("noise must be a sequence of NoiseSpec values")
        # Surface bad nested values now, as configuration errors, rather than
        # midway through a run.
        try:
            self.partition_plan(seed=0)
            self.sgd_config(seed=0)
            if self.dataset_file is None:
                ArchSpec(self.dim, self.hidden_dims, self.num_classes)
                # One-row probe of the generator checks class count, sample
                # count, separation, and the dim >= num_classes - 1 bound.
                synth_blobs(self.num_classes, min(self.samples_per_class, 1), self.dim, self.separation, seed=0)
        except InvalidInputError as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigurationError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")

    def partition_plan(self, seed: int) -> PartitionPlan:
        return PartitionPlan(
            num_clients=self.num_clients,
            benchmark_fraction=self.benchmark_fraction,
            test_fraction=self.test_fraction,
            seed=seed,
            client_proportions=self.client_proportions,
        )

    def sgd_config(self, seed: int) -> SgdConfig:
        return SgdConfig(
            learning_rate=self.learning_rate,
            local_steps=self.local_steps,
            batch_size=self.batch_size,
            seed=seed,
        )


@dataclass(frozen=True)
class RoundMetrics:
    """What gets recorded after each round."""

    round: int
    test_accuracy: float
    fl_loss: float
    cred: Optional[CredReport] = None


@dataclass(frozen=True)
class RunResult:
    """Outcome of one full run."""

    config: ExperimentConfig
    metrics: Tuple[RoundMetrics, ...]
    final_model: Optional[ModelParams]
    final_weights: Optional[Tuple[float, ...]]
    duration_seconds: float
    messages_per_round: float
    messages: Tuple[MessageRecord, ...] = ()

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].test_accuracy

    @property
    def final_fl_loss(self) -> float:
        return self.metrics[-1].fl_loss


def derive_seeds(master_seed: int) -> Dict[str, int]:
    """Named independent sub-seeds for every random stage of a run."""
    ss = np.random.SeedSequence(int(master_seed))
    names = ("data", "partition", "init", "sgd", "participation")
    state = ss.generate_state(len(names), dtype=np.uint64)
    return {name: int(value) for name, value in zip(names, state)}


def _load_dataset_file(path: str) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(len(b"FOCUSDS1"))
    if head == b"FOCUSDS1":
        return load_binary(path)
    return load_csv(path)


def build_scenario(cfg: ExperimentConfig) -> Tuple[ServerState, Tuple[ClientState, ...], Dataset]:
    """Materialize (server, clients, test set) for a config.

    Applies, in order: data synthesis or load, partitioning, label noise on
    the targeted client shards, model init, server init.  Noise seeds are
    decorrelated per client so one spec aimed at several clients does not
    reuse one random stream.
    """
    seeds = derive_seeds(cfg.master_seed)
    if cfg.dataset_file is not None:
        source = _load_dataset_file(cfg.dataset_file)
    else:
        source = synth_blobs(
            num_classes=cfg.num_classes,
            samples_per_class=cfg.samples_per_class,
            dim=cfg.dim,
            separation=cfg.separation,
            seed=seeds["data"],
        )
    shards, bench, test = partition(source, cfg.partition_plan(seed=seeds["partition"]))
    shards = list(shards)
    for ns in cfg.noise:
        if not ns.target_clients:
            raise ConfigurationError("a noise spec must name at least one target client")
        for k in ns.target_clients:
            if k >= cfg.num_clients:
                raise ConfigurationError(
                    f"noise targets client {k} but there are only {cfg.num_clients} clients"
                )
            child_seed = int(np.random.SeedSequence([int(ns.seed), int(k)]).generate_state(1, dtype=np.uint64)[0])
            per_client = NoiseSpec(
                kind=ns.kind,
                fraction=ns.fraction,
                target_clients=(),
                seed=child_seed,
                flip_map=ns.flip_map,
            )
            try:
                shards[k] = inject_noise(shards[k], per_client)
            except InvalidInputError as exc:
                raise ConfigurationError(f"noise spec for client {k}: {exc}") from exc
    arch = ArchSpec(source.dim, cfg.hidden_dims, source.num_classes)
    global0 = learner.init_params(arch, seeds["init"])
    clients = tuple(
        ClientState(id=k, data=shard, local_model=global0) for k, shard in enumerate(shards)
    )
    server = init_server(
        global0,
        bench,
        clients,
        alpha=cfg.alpha,
        reduction=cfg.reduction,
        standardize_e=cfg.standardize_e,
    )
    return server, clients, test


def fl_training_loss(clients: Sequence[ClientState]) -> float:
    """Mean over clients of each local model's mean cross-entropy on its shard."""
    return float(
        np.mean([federation.model_test(c.local_model, c.data, "mean") for c in clients])
    )


def _local_baseline_round(
    clients: Tuple[ClientState, ...], sgd: SgdConfig, t: int
) -> Tuple[ClientState, ...]:
    """No-communication baseline: every client keeps training its own model."""
    updated = []
    try:
        for c in clients:
            updated.append(replace(c, local_model=learner.client_update(c.local_model, c.data, sgd)))
    except TrainingDivergenceError as exc:
        raise RoundError(f"round {t} failed: {exc}", round_index=t) from exc
    return tuple(updated)


def run(cfg: ExperimentConfig) -> RunResult:
    """Execute a full experiment and return its metrics and final model.

    A failed round is re-raised as :class:`RoundError` carrying the metrics
    of all completed rounds in ``partial_metrics``.
    """
    seeds = derive_seeds(cfg.master_seed)
    server, clients, test = build_scenario(cfg)
    sgd = cfg.sgd_config(seed=seeds["sgd"])
    k = len(clients)
    prng = np.random.default_rng(seeds["participation"])
    messages: List[MessageRecord] = []
    metrics: List[RoundMetrics] = []
    start = time.perf_counter()
    try:
        for t in range(1, cfg.rounds + 1):
            participants = None
            if cfg.participation_fraction < 1.0:
                size = max(1, int(round(cfg.participation_fraction * k)))
                participants = np.sort(prng.choice(k, size=size, replace=False)).tolist()
            cred: Optional[CredReport] = None
            if cfg.aggregator == "focus":
                server, clients, cred = focus_round(server, clients, sgd, participants, messages)
                acc = learner.accuracy(server.global_model, test)
            elif cfg.aggregator == "fedavg":
                server, clients, _ = fedavg_round(server, clients, sgd, participants, messages)
                acc = learner.accuracy(server.global_model, test)
            else:
                clients = _local_baseline_round(clients, sgd, t)
                acc = float(np.mean([learner.accuracy(c.local_model, test) for c in clients]))
            metrics.append(RoundMetrics(t, acc, fl_training_loss(clients), cred))
    except RoundError as exc:
        exc.partial_metrics = tuple(metrics)
        raise
    duration = time.perf_counter() - start
    if cfg.aggregator == "local_baseline":
        final_model = None
        final_weights = None
    else:
        final_model = server.global_model
        final_weights = tuple(float(w) for w in server.weights)
    return RunResult(
        config=cfg,
        metrics=tuple(metrics),
        final_model=final_model,
        final_weights=final_weights,
        duration_seconds=duration,
        messages_per_round=len(messages) / len(metrics),
        messages=tuple(messages),
    )


@dataclass(frozen=True)
class ComparisonReport:
    """Two runs of the same scenario under different aggregators, aligned.

    ``rows`` holds ``(label, round, accuracy, fl_loss)`` for every round of
    both runs (2T rows); ``final_accuracy_delta`` is run A minus run B.
    """

    label_a: str
    label_b: str
    result_a: RunResult
    result_b: RunResult
    rows: Tuple[Tuple[str, int, float, float], ...]
    final_accuracy_delta: float
    final_weights_a: Optional[Tuple[float, ...]]
    final_weights_b: Optional[Tuple[float, ...]]


def compare(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig) -> ComparisonReport:
    """Run two configs that differ only in aggregator and/or noise.

    Anything else differing between the configs would confound the
    comparison, so it is rejected.
    """
    stripped_a = {key: value for key, value in asdict(cfg_a).items() if key not in ("aggregator", "noise")}
    stripped_b = {key: value for key, value in asdict(cfg_b).items() if key not in ("aggregator", "noise")}
    if stripped_a != stripped_b:
        diff = sorted(key for key in stripped_a if stripped_a[key] != stripped_b[key])
        raise InvalidInputError(
            f"configs may differ only in aggregator and noise; they also differ in {diff}"
        )
    label_a, label_b = cfg_a.aggregator, cfg_b.aggregator
    if label_a == label_b:
        label_a, label_b = f"{label_a}-a", f"{label_b}-b"
    result_a = run(cfg_a)
    result_b = run(cfg_b)
    rows: List[Tuple[str, int, float, float]] = []
    for label, result in ((label_a, result_a), (label_b, result_b)):
        for m in result.metrics:
            rows.append((label, m.round, m.test_accuracy, m.fl_loss))
    return ComparisonReport(
        label_a=label_a,
        label_b=label_b,
        result_a=result_a,
        result_b=result_b,
        rows=tuple(rows),
        final_accuracy_delta=result_a.final_accuracy - result_b.final_accuracy,
        final_weights_a=result_a.final_weights,
        final_weights_b=result_b.final_weights,
    )


def seed_sweep(cfg: ExperimentConfig, seeds: Sequence[int]) -> Tuple[RunResult, ...]:
    """Run the same config under several master seeds."""
    if not seeds:
        raise InvalidInputError("seed_sweep requires at least one seed")
    return tuple(run(replace(cfg, master_seed=int(s))) for s in seeds)


def summarize_accuracy(results: Sequence[RunResult]) -> Tuple[float, float]:
    """Mean and standard deviation of final test accuracy across runs."""
    finals = [r.final_accuracy for r in results]
    return float(np.mean(finals)), float(np.std(finals))


# ---------------------------------------------------------------------------
# Runs on disk
# ---------------------------------------------------------------------------


def config_hash(cfg: ExperimentConfig) -> str:
    """Short stable fingerprint of a config (12 hex chars of sha256)."""
    canonical = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def write_run_result(result: RunResult, run_dir) -> None:
    """Write metrics.csv, credibility.csv, result.json, and the checkpoint.

    CSV floats use ``repr``, so rerunning an identical config reproduces the
    files byte for byte.  ``credibility.csv`` is only written when at least
    one round produced a scoring report.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    lines = [METRICS_CSV_HEADER]
    for m in result.metrics:
        lines.append(f"{m.round},{repr(float(m.test_accuracy))},{repr(float(m.fl_loss))}")
    (run_dir / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    cred_lines = [federation.CRED_CSV_HEADER]
    for m in result.metrics:
        if m.cred is not None:
            cred_lines.extend(federation.cred_csv_rows(m.round, m.cred))
    if len(cred_lines) > 1:
        (run_dir / "credibility.csv").write_text("\n".join(cred_lines) + "\n", encoding="utf-8")

    checkpoint = None
    if result.final_model is not None:
        checkpoint = "model.bin"
        federation.save_model(result.final_model, str(run_dir / checkpoint))

    summary = {
        "config": asdict(result.config),
        "config_hash": config_hash(result.config),
        "rounds_completed": len(result.metrics),
        "final_accuracy": result.final_accuracy,
        "final_fl_loss": result.final_fl_loss,
        "final_weights": list(result.final_weights) if result.final_weights is not None else None,
        "messages_per_round": result.messages_per_round,
        "duration_seconds": result.duration_seconds,
        "checkpoint": checkpoint,
    }
    (run_dir / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_metrics_csv(path) -> List[Tuple[int, float, float]]:
    """Read a metrics.csv back into (round, accuracy, fl_loss) tuples."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or text[0] != METRICS_CSV_HEADER:
        raise InvalidInputError(f"{path}: malformed metrics file")
    rows = []
    for line in text[1:]:
        cells = line.split(",")
        if len(cells) != 3:
            raise InvalidInputError(f"{path}: malformed metrics row {line!r}")
        rows.append((int(cells[0]), float(cells[1]), float(cells[2])))
    return rows


def load_credibility_csv(path) -> List[Tuple[int, int, float, float, float, float, float]]:
    """Read a credibility.csv back into (round, client, ls, ll, e, c, w) tuples."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or text[0] != federation.CRED_CSV_HEADER:
        raise InvalidInputError(f"{path}: malformed credibility file")
    rows = []
    for line in text[1:]:
        cells = line.split(",")
        if len(cells) != 7:
            raise InvalidInputError(f"{path}: malformed credibility row {line!r}")
        rows.append((int(cells[0]), int(cells[1])) + tuple(float(c) for c in cells[2:]))
    return rows
