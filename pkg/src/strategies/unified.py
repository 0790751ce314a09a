"""Unified FedVC rounds: model and concepts trained together by gradient descent.

Each client updates a private copy of the concepts through the
gamma-weighted preference term only; the server averages both the model
weights and the client concept copies with the cohort weights.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from src.concepts import ClientPreference, ConceptBank, StreamStats, accumulate_minibatch, finalize_upsilon
from src.errors import ProtocolError
from src.federation import (
    ClientState,
    ModelBroadcast,
    RoundContext,
    RoundReport,
    ServerState,
    UnifiedUpdate,
    aggregate_arrays,
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
from src.losses import LossConfig, unified_loss
from src.model import ArchConfig, forward
from src.strategies.fedvc import preference_pass
from src.tensor import ParamSet, Tensor, backward, sgd_step

logger = logging.getLogger(__name__)

CONCEPTS_GRAD_KEY = "__concepts__"


@dataclass
class UnifiedResult:
    params: ParamSet
    concepts: np.ndarray
    stats: StreamStats
    loss: float


def client_update_unified(
    params: ParamSet,
    arch: ArchConfig,
    bank: ConceptBank,
    client: ClientState,
    ctx: RoundContext,
    lr: float,
    rng: np.random.Generator,
) -> UnifiedResult:
    if client.num_train == 0:
        raise ProtocolError(f"client {client.client_id} has no local training data")
    cfg = ctx.config
    loss_cfg = LossConfig(gamma=cfg.gamma, mode="unified")
    upsilon = preference_pass(params, arch, bank, client.train_x, client.preference.upsilon)
    stats = client.stats if client.stats is not None else StreamStats.initial(bank, cfg.kappa)
    concepts = bank.concepts.copy()

    losses = []
    for _ in range(cfg.local_epochs):
        for idx in minibatches(client.num_train, cfg.batch_size, rng):
            live = Tensor(concepts, requires_grad=True)
            out = forward(params, arch, client.train_x[idx])
            terms = unified_loss(out, client.train_y[idx], bank, upsilon, loss_cfg, concepts=live)
            grads = backward(terms.total, {**params, CONCEPTS_GRAD_KEY: live})
            concept_grad = grads.pop(CONCEPTS_GRAD_KEY)
            params = sgd_step(params, grads, lr)
            if not cfg.freeze_concepts:
                concepts = concepts - lr * concept_grad
            stats = accumulate_minibatch(stats, terms.relevance, out.embedding.data)
            losses.append(terms.total.item())
    return UnifiedResult(params, concepts, stats, float(np.mean(losses)) if losses else float("nan"))


def run_round_unified(server: ServerState, clients: Sequence[ClientState], ctx: RoundContext) -> RoundReport:
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

    def work(k: int) -> tuple[UnifiedUpdate, StreamStats, float]:
        received = ctx.channel.transfer(snapshot)
        result = client_update_unified(received.params, server.arch, bank, clients[k], ctx, lr,
                                       client_rng(server.seed, r, k))
        update = ctx.channel.transfer(UnifiedUpdate(k, result.params, result.concepts, clients[k].num_train))
        return update, result.stats, result.loss

    outcomes = run_clients(work, cohort, ctx.threads)
    require_results(outcomes, cohort, r)
    updates = {k: update for k, (update, _, _) in outcomes.items()}

    weights = cohort_weights({k: u.num_samples for k, u in updates.items()})
    server.params = aggregate_params([(u.params, weights[k]) for k, u in updates.items()])
    server.check_finite()
    if not cfg.freeze_concepts:
        server.bank = bank.with_concepts(aggregate_arrays([(u.concepts, weights[k]) for k, u in updates.items()]))
    # statistics stay on the client; only the concept copies travel
    for k, (_, stats, _) in outcomes.items():
        clients[k].stats = stats
        clients[k].preference = ClientPreference(finalize_upsilon(stats))

    return RoundReport(
        round=r,
        strategy=ctx.strategy.name,
        lr=lr,
        cohort=cohort,
        completed=list(updates),
        bytes_exchanged=ctx.channel.reset(),
        wall_time=time.perf_counter() - start,
        local_loss={k: loss for k, (_, _, loss) in outcomes.items()},
    )
