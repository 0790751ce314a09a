"""Baseline rounds: local-only, FedAvg (with or without fine-tuning) and FedProx."""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence

from src.errors import ConfigError
from src.federation import (
    ClientState,
    ModelBroadcast,
    ModelUpdate,
    RoundContext,
    RoundReport,
    ServerState,
    aggregate_params,
    apply_dropout,
    client_rng,
    cohort_weights,
    require_results,
    round_rng,
    run_clients,
    sample_clients,
    train_classifier,
)

logger = logging.getLogger(__name__)

BASELINES = ("local_only", "fedavg", "fedavg_ft", "fedprox")


def _run_local_only(server: ServerState, clients: Sequence[ClientState], ctx: RoundContext) -> RoundReport:
    """Every participant trains its own model; nothing is exchanged."""
    start = time.perf_counter()
    cfg = ctx.config
    r = server.round
    lr = cfg.lr_at(r)
    participants = [c.client_id for c in clients if c.role == "train"]
    ctx.guard.admit(participants)

    def work(k: int) -> tuple:
        client = clients[k]
        start_params = client.params if client.params is not None else server.params
        return train_classifier(
            start_params, server.arch, client.train_x, client.train_y,
            epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=lr,
            rng=client_rng(server.seed, r, k),
        )

    outcomes = run_clients(work, participants, ctx.threads)
    require_results(outcomes, participants, r)
    for k, (params, _) in outcomes.items():
        clients[k].params = params

    return RoundReport(
        round=r,
        strategy=ctx.strategy.name,
        lr=lr,
        cohort=participants,
        completed=list(outcomes),
        bytes_exchanged=ctx.channel.reset(),
        wall_time=time.perf_counter() - start,
        local_loss={k: loss for k, (_, loss) in outcomes.items()},
    )


def _run_federated(server: ServerState, clients: Sequence[ClientState], ctx: RoundContext) -> RoundReport:
    start = time.perf_counter()
    cfg = ctx.config
    r = server.round
    lr = cfg.lr_at(r)
    rng = round_rng(server.seed, r)
    participants = [c.client_id for c in clients if c.role == "train"]
    cohort = apply_dropout(sample_clients(participants, cfg.cohort_size, rng), cfg.drop_prob, rng)
    ctx.guard.admit(cohort)

    mu = ctx.strategy.mu if ctx.strategy.name == "fedprox" else 0.0
    snapshot = ModelBroadcast(round=r, params=server.params)

    def work(k: int) -> tuple[ModelUpdate, float]:
        received = ctx.channel.transfer(snapshot)
        client = clients[k]
        params, loss = train_classifier(
            received.params, server.arch, client.train_x, client.train_y,
            epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=lr,
            rng=client_rng(server.seed, r, k),
            anchor=received.params, mu=mu,
        )
        return ctx.channel.transfer(ModelUpdate(k, params, client.num_train)), loss

    outcomes = run_clients(work, cohort, ctx.threads)
    require_results(outcomes, cohort, r)
    updates = {k: update for k, (update, _) in outcomes.items()}
    weights = cohort_weights({k: u.num_samples for k, u in updates.items()})
    server.params = aggregate_params([(u.params, weights[k]) for k, u in updates.items()])
    server.check_finite()

    return RoundReport(
        round=r,
        strategy=ctx.strategy.name,
        lr=lr,
        cohort=cohort,
        completed=list(updates),
        bytes_exchanged=ctx.channel.reset(),
        wall_time=time.perf_counter() - start,
        local_loss={k: loss for k, (_, loss) in outcomes.items()},
    )


def run_baseline(strategy: str, server: ServerState, clients: Sequence[ClientState], ctx: RoundContext) -> RoundReport:
    if strategy not in BASELINES:
        raise ConfigError("strategy.name", f"{strategy!r} is not a baseline; expected one of {BASELINES}")
    if strategy == "local_only":
        return _run_local_only(server, clients, ctx)
    return _run_federated(server, clients, ctx)
