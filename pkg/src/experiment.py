"""Experiment orchestration: data, partition, training loop, evaluation and artifacts.

A run directory ends up with::

    config.yaml        resolved configuration (re-parses to the same model)
    partition.yaml     client manifest
    metrics.csv        one row per (strategy, round, client, split)
    projections.csv    2-D projections of per-sample preferences / embeddings
    groups.csv         group-wise mean/std curves
    summary.csv/.json  final-round table per strategy and client role
    round_<r>.ckpt     checkpoints (under <strategy>/ when several strategies run)
    DONE               written last; absent when the run failed
"""

from __future__ import annotations

import json
import logging
import subprocess
import sys
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.checkpoint import write_checkpoint
from src.concepts import (
    ClientPreference,
    ConceptBank,
    estimated_preference,
    init_bank,
    init_bank_kmeanspp,
    load_bank,
    relevance,
)
from src.config import SWEEP_AXES, ExperimentConfig, dump_config
from src.datasets import Dataset, load_idx, synth_gmm_dataset
from src.errors import ConceptError, MetricsError, RoundAborted
from src.federation import (
    ClientState,
    HygieneGuard,
    RoundContext,
    ServerState,
    StrategyConfig,
    evaluate_global,
    resolve_threads,
)
from src.metrics import MetricsRecord, preference_cluster_agreement, project_preferences
from src.model import ArchConfig, embed, init_model
from src.partition import ClientPartition, dirichlet_label_partition, feature_shift_partition
from src.report import MetricsSink, ProjectionRow, summary_table, write_groups, write_summary
from src.strategies import run_round
from src.strategies.fedvc import preference_pass
from src.util import annotate, write_json

logger = logging.getLogger(__name__)

HELDOUT_PREFERENCE_ITERATIONS = 20

ROOT = Path(__file__).resolve().parents[1]
DONE = "DONE"


@dataclass
class StrategyOutcome:
    strategy: str
    rounds_completed: int
    rounds_aborted: int
    bytes_exchanged: int
    cluster_agreement: float | None
    trained_clients: list[int]


@dataclass
class ExperimentResult:
    out_dir: Path
    records: list[MetricsRecord]
    summary: pd.DataFrame
    outcomes: dict[str, StrategyOutcome] = field(default_factory=dict)


# ------------------------------ building ------------------------------- #

def build_data(cfg: ExperimentConfig) -> tuple[Dataset, ClientPartition]:
    ds_cfg = cfg.dataset
    if ds_cfg.kind == "synthetic":
        ds, _ = synth_gmm_dataset(
            ds_cfg.num_classes, ds_cfg.clusters_per_class, ds_cfg.dim,
            ds_cfg.separation, ds_cfg.num_samples, cfg.seed,
        )
    else:
        ds = load_idx(Path(ds_cfg.images_path), Path(ds_cfg.labels_path), ds_cfg.num_classes)
    shift = cfg.shift.to_shift_config()
    if shift.mode == "target_shift":
        return ds, dirichlet_label_partition(ds, shift, cfg.seed)
    return feature_shift_partition(ds, shift, cfg.seed)


def build_clients(ds: Dataset, partition: ClientPartition, num_concepts: int) -> list[ClientState]:
    clients = []
    for k in range(partition.num_clients):
        tr, ts = partition.train_indices[k], partition.test_indices[k]
        clients.append(ClientState(
            client_id=k,
            group=int(partition.groups[k]),
            role=partition.roles[k],
            train_x=ds.features[tr],
            train_y=ds.labels[tr],
            test_x=ds.features[ts],
            test_y=ds.labels[ts],
            preference=ClientPreference.uniform(num_concepts),
        ))
    return clients


def init_concepts(cfg: ExperimentConfig, params, arch: ArchConfig, clients: Sequence[ClientState]) -> ConceptBank:
    c = cfg.concepts
    if c.init == "file":
        bank = load_bank(Path(c.init_path), iota=c.iota)
        if (bank.num_concepts, bank.dim) != (c.num_concepts, c.embed_dim):
            raise ConceptError(f"concept file has shape {bank.concepts.shape}, "
                               f"expected ({c.num_concepts}, {c.embed_dim})")
        return bank
    if c.init == "kmeans++":
        pool = np.concatenate([c_.train_x for c_ in clients if c_.role == "train"])
        z, _ = embed(params, arch, pool)
        return init_bank_kmeanspp(z, c.num_concepts, iota=c.iota, seed=cfg.seed)
    return init_bank(c.num_concepts, c.embed_dim, iota=c.iota, seed=cfg.seed)


# ------------------------------ projections ----------------------------- #

def collect_projections(
    server: ServerState,
    clients: Sequence[ClientState],
    partition: ClientPartition,
    ds: Dataset,
    strategy: StrategyConfig,
    estimate_test_preferences: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per test sample: the vector to project, sample id, client id and group.

    FedVC strategies use estimated preferences ``s @ C``; baselines use the
    trunk representation.
    """
    vectors, sample_ids, client_ids, groups = [], [], [], []
    for client in clients:
        if len(client.test_y) == 0:
            continue
        z, hidden = embed(server.params, server.arch, client.test_x)
        if strategy.is_fedvc:
            upsilon = client.preference.upsilon
            if client.role == "test" and estimate_test_preferences:
                upsilon = preference_pass(server.params, server.arch, server.bank, client.train_x, upsilon,
                                          iterations=HELDOUT_PREFERENCE_ITERATIONS)
            vectors.append(estimated_preference(relevance(z, server.bank, upsilon), server.bank))
        else:
            vectors.append(hidden)
        sample_ids.append(partition.test_indices[client.client_id])
        client_ids.append(np.full(len(client.test_y), client.client_id))
        groups.append(np.full(len(client.test_y), client.group))
    return (np.concatenate(vectors), np.concatenate(sample_ids),
            np.concatenate(client_ids), np.concatenate(groups))


def _write_projections(
    sink: MetricsSink,
    run_id: str,
    round_index: int,
    strategy: str,
    vectors: np.ndarray,
    sample_ids: np.ndarray,
    client_ids: np.ndarray,
    groups: np.ndarray,
) -> None:
    coords = project_preferences(vectors)
    sink.append(
        ProjectionRow(run_id, round_index, strategy, int(s), int(c), int(g), float(x), float(y))
        for s, c, g, (x, y) in zip(sample_ids, client_ids, groups, coords)
    )


# ------------------------------- training ------------------------------- #

def _checkpoint_dir(cfg: ExperimentConfig, out_dir: Path, strategy: str) -> Path:
    return out_dir if len(cfg.strategy.name) == 1 else out_dir / strategy


def train_strategy(
    cfg: ExperimentConfig,
    strategy: StrategyConfig,
    ds: Dataset,
    partition: ClientPartition,
    out_dir: Path,
    metrics_sink: MetricsSink,
    projection_sink: MetricsSink | None,
    threads: int,
) -> tuple[list[MetricsRecord], StrategyOutcome]:
    fed_cfg = cfg.federation_config()
    arch = cfg.arch(ds.input_dim)
    run_id = cfg.output.run_id
    params = init_model(arch, cfg.seed)
    clients = build_clients(ds, partition, cfg.concepts.num_concepts)
    server = ServerState(params, init_concepts(cfg, params, arch, clients), arch, strategy.name, seed=cfg.seed)
    ctx = RoundContext(fed_cfg, strategy, HygieneGuard(partition.heldout), threads=threads)
    fine_tune = strategy.name == "fedavg_ft"
    every = cfg.output.checkpoint_every

    records: list[MetricsRecord] = []
    aborted = 0
    total_bytes = 0
    for r in range(fed_cfg.rounds):
        server.round = r
        try:
            report = run_round(server, clients, ctx)
            total_bytes += report.bytes_exchanged
            logger.info("[%s] round %d/%d lr=%.5f cohort=%s bytes=%d",
                        strategy.name, r + 1, fed_cfg.rounds, report.lr, report.completed, report.bytes_exchanged)
        except RoundAborted as exc:
            aborted += 1
            ctx.channel.reset()
            logger.warning("[%s] %s; global state unchanged", strategy.name, exc)
        round_records = evaluate_global(server, clients, ctx, fine_tune=fine_tune, run_id=run_id)
        metrics_sink.append(round_records)
        records.extend(round_records)

        last = r == fed_cfg.rounds - 1
        if (every and (r + 1) % every == 0) or last:
            upsilons = {c.client_id: c.preference.upsilon for c in clients} if strategy.is_fedvc else None
            concepts = server.bank.concepts if strategy.is_fedvc else None
            write_checkpoint(_checkpoint_dir(cfg, out_dir, strategy.name) / f"round_{r + 1}.ckpt",
                             server.params, concepts=concepts, upsilons=upsilons)

    agreement = None
    if projection_sink is not None:
        vectors, sample_ids, client_ids, groups = collect_projections(
            server, clients, partition, ds, strategy, fed_cfg.estimate_test_preferences)
        _write_projections(projection_sink, run_id, fed_cfg.rounds, strategy.name,
                           vectors, sample_ids, client_ids, groups)
        truth = ds.domains[sample_ids] if ds.domains is not None else groups
        try:
            agreement = preference_cluster_agreement(vectors, truth, seed=cfg.seed)
            logger.info("[%s] cluster agreement (ARI) of projected vectors: %.3f", strategy.name, agreement)
        except MetricsError as exc:
            logger.warning("[%s] cluster agreement unavailable: %s", strategy.name, exc)

    outcome = StrategyOutcome(
        strategy=strategy.name,
        rounds_completed=fed_cfg.rounds - aborted,
        rounds_aborted=aborted,
        bytes_exchanged=total_bytes,
        cluster_agreement=agreement,
        trained_clients=sorted(ctx.guard.trained),
    )
    return records, outcome


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    out_dir = Path(cfg.output.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in (DONE, "metrics.csv", "projections.csv"):
        (out_dir / stale).unlink(missing_ok=True)
    dump_config(cfg, out_dir / "config.yaml")

    ds, partition = build_data(cfg)
    partition.write_manifest(out_dir / "partition.yaml")
    threads = resolve_threads()
    metrics_sink = MetricsSink(out_dir / "metrics.csv", MetricsRecord.columns())
    projection_sink = MetricsSink(out_dir / "projections.csv", ProjectionRow.columns()) if cfg.output.projections else None

    records: list[MetricsRecord] = []
    outcomes: dict[str, StrategyOutcome] = {}
    for strategy in cfg.strategy_configs():
        start = time.perf_counter()
        logger.info("Training %s for %d rounds on %d clients (%d participants)",
                    strategy.name, cfg.federation.rounds, partition.num_clients, len(partition.participants))
        strategy_records, outcome = train_strategy(
            cfg, strategy, ds, partition, out_dir, metrics_sink, projection_sink, threads)
        records.extend(strategy_records)
        outcomes[strategy.name] = outcome
        logger.info("Finished %s in %.1fs", strategy.name, time.perf_counter() - start)

    write_groups(records, out_dir)
    table = summary_table(records)
    table["cluster_agreement"] = table["strategy"].map(lambda s: outcomes[s].cluster_agreement)
    write_summary(table, out_dir)
    write_json(out_dir / "outcomes.json", {name: asdict(o) for name, o in outcomes.items()})
    (out_dir / DONE).write_text("ok\n", encoding="utf-8")
    return ExperimentResult(out_dir=out_dir, records=records, summary=table, outcomes=outcomes)


# -------------------------------- sweeps -------------------------------- #

@dataclass
class SweepResult:
    axis: str
    value: float
    status: str
    message: str
    returncode: int
    duration_seconds: float
    out_dir: str


def run_child(axis: str, value: float, base_config: Path, out_dir: Path, python_cmd: str,
              timeout: int, extra_args: Sequence[str] = ()) -> SweepResult:
    start = time.time()
    title = f"{axis}={value}"
    cmd = [python_cmd, "-m", "src.run", "run", "--config", str(base_config),
           "--set", f"{SWEEP_AXES[axis]}={value}", "--out", str(out_dir), *extra_args]
    logger.info("[sweep] %s: %s", title, " ".join(cmd))
    try:
        proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True, timeout=timeout, check=False)
    except subprocess.TimeoutExpired:
        message = f"Timed out after {timeout}s"
        annotate("error", title, message)
        return SweepResult(axis, value, "failed", message, 124, round(time.time() - start, 2), str(out_dir))

    if proc.returncode != 0:
        if proc.stderr:
            print(proc.stderr, file=sys.stderr)
        message = f"Run exited with code {proc.returncode}"
        annotate("error", title, message)
        return SweepResult(axis, value, "failed", message, proc.returncode, round(time.time() - start, 2), str(out_dir))
    if not (out_dir / DONE).exists():
        message = f"Run finished without a {DONE} marker"
        annotate("error", title, message)
        return SweepResult(axis, value, "failed", message, 1, round(time.time() - start, 2), str(out_dir))
    return SweepResult(axis, value, "ok", "completed", 0, round(time.time() - start, 2), str(out_dir))


def run_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: Sequence[float],
    *,
    jobs: int = 1,
    timeout: int = 3600,
    python_cmd: str = sys.executable,
) -> tuple[pd.DataFrame, list[SweepResult]]:
    """One child process per value of ``axis``; children's summaries are stacked into ``sweep.csv``."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    root = Path(cfg.output.out)
    root.mkdir(parents=True, exist_ok=True)
    base_config = dump_config(cfg, root / "base.yaml")
    extra: list[str] = []
    if axis == "gamma" and "fedvc_unified" not in cfg.strategy.name:
        logger.info("gamma only affects fedvc_unified; sweeping that strategy")
        extra = ["--strategy", "fedvc_unified"]

    def child(value: float) -> SweepResult:
        return run_child(axis, value, base_config, root / f"{axis}={value}", python_cmd, timeout, extra)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(child, values))
    else:
        results = [child(v) for v in values]

    frames = []
    for result in results:
        summary_path = Path(result.out_dir) / "summary.json"
        if result.status != "ok" or not summary_path.exists():
            continue
        frame = pd.DataFrame(json.loads(summary_path.read_text(encoding="utf-8")))
        frame.insert(0, "value", result.value)
        frame.insert(0, "axis", axis)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["axis", "value"])
    table.to_csv(root / "sweep.csv", index=False)
    return table, results
