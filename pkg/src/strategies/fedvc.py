"""EM-style FedVC rounds.

Clients first re-estimate their concept weights from local embeddings,
then train on classification plus preference matching against fixed
concepts while folding each batch's responsibilities into their streaming
statistics. The server averages model weights and recomputes the concepts
from the pooled statistics.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from src.concepts import (
    ClientPreference,
    ConceptBank,
    StreamStats,
    accumulate_minibatch,
    finalize_upsilon,
    merge_concepts,
    relevance,
)
from src.errors import ProtocolError
from src.federation import (
    ClientState,
    EMUpdate,
    ModelBroadcast,
    RoundContext,
    RoundReport,
    ServerState,
    aggregate_params,
    apply_dropout,
    client_rng,
    cohort_weights,
    minibatches,
    require_results,
    round_rng,
    run_clients,
    sample_clients,
)
from src.losses import em_loss
from src.model import ArchConfig, embed, forward
from src.tensor import ParamSet, backward, sgd_step

logger = logging.getLogger(__name__)


@dataclass
class EMResult:
    params: ParamSet
    stats: StreamStats
    upsilon: np.ndarray
    loss: float


def preference_pass(
    params: ParamSet,
    arch: ArchConfig,
    bank: ConceptBank,
    x: np.ndarray,
    upsilon: np.ndarray,
    iterations: int = 1,
) -> np.ndarray:
    """Concept weights re-estimated as the mean relevance over local samples.

    More than one iteration runs EM on the weights alone with the concepts
    held fixed.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    z, _ = embed(params, arch, x)
    weights = np.asarray(upsilon, dtype=np.float64)
    for _ in range(iterations):
        weights = relevance(z, bank, weights).mean(axis=0)
        weights = weights / weights.sum()
    return weights


def client_update_em(
    params: ParamSet,
    arch: ArchConfig,
    bank: ConceptBank,
    client: ClientState,
    ctx: RoundContext,
    lr: float,
    rng: np.random.Generator,
) -> EMResult:
    if client.num_train == 0:
        raise ProtocolError(f"client {client.client_id} has no local training data")
    cfg = ctx.config
    upsilon = preference_pass(params, arch, bank, client.train_x, client.preference.upsilon)
    stats = client.stats if client.stats is not None else StreamStats.initial(bank, cfg.kappa)

    losses = []
    for _ in range(cfg.local_epochs):
        for idx in minibatches(client.num_train, cfg.batch_size, rng):
            out = forward(params, arch, client.train_x[idx])
            terms = em_loss(out, client.train_y[idx], bank, upsilon)
            params = sgd_step(params, backward(terms.total, params), lr)
            stats = accumulate_minibatch(stats, terms.relevance, out.embedding.data)
            losses.append(terms.total.item())
    return EMResult(params, stats, upsilon, float(np.mean(losses)) if losses else float("nan"))


def run_round_em(server: ServerState, clients: Sequence[ClientState], ctx: RoundContext) -> RoundReport:
    start = time.perf_counter()
    cfg = ctx.config
    r = server.round
    lr = cfg.lr_at(r)
    rng = round_rng(server.seed, r)
    participants = [c.client_id for c in clients if c.role == "train"]
    cohort = apply_dropout(sample_clients(participants, cfg.cohort_size, rng), cfg.drop_prob, rng)
    ctx.guard.admit(cohort)

    snapshot = ModelBroadcast(round=r, params=server.params, concepts=server.bank.concepts)
    bank = server.bank

    def work(k: int) -> tuple[EMUpdate, float]:
        received = ctx.channel.transfer(snapshot)
        result = client_update_em(received.params, server.arch, bank, clients[k], ctx, lr,
                                  client_rng(server.seed, r, k))
        return ctx.channel.transfer(EMUpdate(k, result.params, result.stats, clients[k].num_train)), result.loss

    outcomes = run_clients(work, cohort, ctx.threads)
    require_results(outcomes, cohort, r)
    updates = {k: update for k, (update, _) in outcomes.items()}

    weights = cohort_weights({k: u.num_samples for k, u in updates.items()})
    server.params = aggregate_params([(u.params, weights[k]) for k, u in updates.items()])
    server.check_finite()
    if not cfg.freeze_concepts:
        server.bank = merge_concepts([u.stats for u in updates.values()], bank)
    for k, update in updates.items():
        clients[k].stats = update.stats
        clients[k].preference = ClientPreference(finalize_upsilon(update.stats))

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
