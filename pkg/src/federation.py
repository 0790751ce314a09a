"""Simulated federation: server and client state, messages, sampling and aggregation.

Clients are logical objects inside one process. Everything that crosses
the simulated wire is one of the message types below and passes through a
``Channel``, which rejects anything else and counts payload bytes. The
server changes state only after all cohort results are in (round barrier);
client results are merged in client-id order.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TypeVar

import numpy as np

from src.concepts import ClientPreference, ConceptBank, StreamStats
from src.errors import ConfigError, FedVCError, MetricsError, ProtocolError, RoundAborted
from src.losses import classification_loss, proximal_term
from src.metrics import MetricsRecord, classification_metrics
from src.model import ArchConfig, forward, predict_proba
from src.tensor import ParamSet, backward, sgd_step

logger = logging.getLogger(__name__)

STRATEGY_NAMES = ("local_only", "fedavg", "fedavg_ft", "fedprox", "fedvc_em", "fedvc_unified")
FEDVC_STRATEGIES = ("fedvc_em", "fedvc_unified")
WEIGHT_TOL = 1e-9
THREADS_ENV = "FEDVC_THREADS"

# RNG stream tags mixed into (seed, round, client) seeds
SAMPLER_STREAM = 0
CLIENT_STREAM = 1
FINETUNE_STREAM = 2

T = TypeVar("T")


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "fedvc_em"
    mu: float = 0.01
    finetune_epochs: int = 1

    def __post_init__(self) -> None:
        if self.name not in STRATEGY_NAMES:
            raise ConfigError("strategy.name", f"unknown strategy {self.name!r}; expected one of {STRATEGY_NAMES}")
        if self.mu < 0:
            raise ConfigError("strategy.mu", f"must be >= 0, got {self.mu}")
        if self.finetune_epochs < 0:
            raise ConfigError("strategy.finetune_epochs", f"must be >= 0, got {self.finetune_epochs}")

    @property
    def is_fedvc(self) -> bool:
        return self.name in FEDVC_STRATEGIES


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 2
    batch_size: int = 10
    lr: float = 0.005
    lr_decay: float = 0.8
    decay_every: int = 10
    cohort_size: int = 10
    iota: float = 0.1
    kappa: float = 0.05
    gamma: float = 0.1
    freeze_concepts: bool = False
    drop_prob: float = 0.0
    estimate_test_preferences: bool = False
    eval_splits: tuple[str, ...] = ("local_test",)

    def lr_at(self, round_index: int) -> float:
        """Step decay: ``lr * lr_decay ** (round // decay_every)``."""
        return self.lr * self.lr_decay ** (round_index // self.decay_every)


@dataclass
class ClientState:
    client_id: int
    group: int
    role: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    preference: ClientPreference
    stats: StreamStats | None = None
    params: ParamSet | None = None

    @property
    def num_train(self) -> int:
        return len(self.train_y)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return (self.train_x, self.train_y) if name == "local_train" else (self.test_x, self.test_y)


@dataclass
class ServerState:
    params: ParamSet
    bank: ConceptBank
    arch: ArchConfig
    strategy: str
    seed: int = 0
    round: int = 0

    def check_finite(self) -> None:
        for name, t in self.params.items():
            if not np.all(np.isfinite(t.data)):
                raise ProtocolError(f"global parameter {name!r} is not finite after aggregation")


@dataclass
class RoundReport:
    round: int
    strategy: str
    lr: float
    cohort: list[int]
    completed: list[int]
    bytes_exchanged: int
    wall_time: float = 0.0
    local_loss: dict[int, float] = field(default_factory=dict)
    records: list[MetricsRecord] = field(default_factory=list)


# ------------------------------ messages ------------------------------- #

@dataclass(frozen=True)
class ModelBroadcast:
    round: int
    params: ParamSet
    concepts: np.ndarray | None = None

    @property
    def nbytes(self) -> int:
        return self.params.nbytes + (self.concepts.nbytes if self.concepts is not None else 0)


@dataclass(frozen=True)
class ModelUpdate:
    client_id: int
    params: ParamSet
    num_samples: int

    @property
    def nbytes(self) -> int:
        return self.params.nbytes + 8


@dataclass(frozen=True)
class EMUpdate:
    client_id: int
    params: ParamSet
    stats: StreamStats
    num_samples: int

    @property
    def nbytes(self) -> int:
        return self.params.nbytes + self.stats.nbytes + 8


@dataclass(frozen=True)
class UnifiedUpdate:
    client_id: int
    params: ParamSet
    concepts: np.ndarray
    num_samples: int

    @property
    def nbytes(self) -> int:
        return self.params.nbytes + self.concepts.nbytes + 8


MESSAGE_TYPES = (ModelBroadcast, ModelUpdate, EMUpdate, UnifiedUpdate)
Message = ModelBroadcast | ModelUpdate | EMUpdate | UnifiedUpdate


class Channel:
    """The only path between server and clients; counts bytes per round."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.bytes_sent = 0
        self.messages = 0

    def transfer(self, message: Message) -> Message:
        if type(message) not in MESSAGE_TYPES:
            raise ProtocolError(f"message type {type(message).__name__} is not allowed on the wire")
        with self._lock:
            self.bytes_sent += message.nbytes
            self.messages += 1
        return message

    def reset(self) -> int:
        with self._lock:
            sent, self.bytes_sent, self.messages = self.bytes_sent, 0, 0
        return sent


class HygieneGuard:
    """Tracks which clients took part in federated training; held-out clients never may."""

    def __init__(self, heldout: Iterable[int]) -> None:
        self.heldout = frozenset(int(k) for k in heldout)
        self.trained: set[int] = set()

    def admit(self, cohort: Iterable[int]) -> None:
        cohort = list(cohort)
        leaked = sorted(self.heldout.intersection(cohort))
        if leaked:
            raise ProtocolError(f"held-out clients {leaked} were scheduled for training")
        self.trained.update(cohort)

    def check_finetune(self, strategy: StrategyConfig) -> None:
        if strategy.is_fedvc:
            raise ProtocolError(f"{strategy.name} is evaluated without fine-tuning")


@dataclass
class RoundContext:
    """Per-run settings every round function needs."""

    config: FederationConfig
    strategy: StrategyConfig
    guard: HygieneGuard
    channel: Channel = field(default_factory=Channel)
    threads: int = 1


# ---------------------------- randomness ------------------------------ #

def round_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, SAMPLER_STREAM])


def client_rng(seed: int, round_index: int, client_id: int, stream: int = CLIENT_STREAM) -> np.random.Generator:
    """Independent stream per (seed, round, client) so thread scheduling cannot change results."""
    return np.random.default_rng([seed, round_index, client_id, stream])


def resolve_threads(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return default
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(THREADS_ENV, f"must be >= 1, got {threads}")
    return threads


# ------------------------- sampling and merging ------------------------ #

def sample_clients(population: Sequence[int], cohort_size: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, returned in client-id order."""
    if cohort_size < 1:
        raise ConfigError("federation.cohort_size", f"must be >= 1, got {cohort_size}")
    if cohort_size > len(population):
        raise ConfigError("federation.cohort_size",
                          f"cohort of {cohort_size} exceeds the {len(population)} training clients")
    chosen = rng.choice(np.asarray(population, dtype=np.int64), size=cohort_size, replace=False)
    return sorted(int(k) for k in chosen)


def apply_dropout(cohort: list[int], drop_prob: float, rng: np.random.Generator) -> list[int]:
    if drop_prob <= 0:
        return cohort
    kept = [k for k, u in zip(cohort, rng.random(len(cohort))) if u >= drop_prob]
    if len(kept) < len(cohort):
        logger.warning("Dropped clients %s this round", sorted(set(cohort) - set(kept)))
    return kept


def cohort_weights(num_samples: Mapping[int, int]) -> dict[int, float]:
    """alpha_k = N_k / sum_j N_j over the clients that reported back."""
    total = sum(num_samples.values())
    if total <= 0:
        raise ProtocolError("cohort has no training samples")
    return {k: n / total for k, n in sorted(num_samples.items())}


def _check_weights(weights: Sequence[float]) -> None:
    total = float(np.sum(np.asarray(weights, dtype=np.float64)))
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ProtocolError(f"aggregation weights sum to {total!r}, expected 1")
    if any(w < 0 for w in weights):
        raise ProtocolError("aggregation weights must be non-negative")


def aggregate_params(updates: Sequence[tuple[ParamSet, float]]) -> ParamSet:
    """Weighted mean of parameter sets, accumulated in float64."""
    if not updates:
        raise ProtocolError("aggregate_params: no updates")
    _check_weights([w for _, w in updates])
    reference = updates[0][0]
    for params, _ in updates[1:]:
        reference.check_compatible(params, "aggregate_params")
    merged: dict[str, np.ndarray] = {}
    for name, t in reference.items():
        acc = np.zeros(t.shape, dtype=np.float64)
        for params, weight in updates:
            acc += weight * params[name].data.astype(np.float64)
        merged[name] = acc.astype(t.dtype)
    return ParamSet(merged, copy=False)


def aggregate_arrays(updates: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    if not updates:
        raise ProtocolError("aggregate_arrays: no updates")
    _check_weights([w for _, w in updates])
    shape = np.shape(updates[0][0])
    acc = np.zeros(shape, dtype=np.float64)
    for value, weight in updates:
        if np.shape(value) != shape:
            raise ProtocolError(f"aggregate_arrays: shape {np.shape(value)} differs from {shape}")
        acc += weight * np.asarray(value, dtype=np.float64)
    return acc


def run_clients(work: Callable[[int], T], client_ids: Sequence[int], threads: int = 1) -> dict[int, T]:
    """Run ``work`` per client, in parallel when ``threads > 1``.

    A client whose update raises a simulator or numeric error is dropped
    from the round with a warning. Results come back keyed and ordered by
    client id.
    """
    def guarded(k: int) -> tuple[int, T | None]:
        try:
            return k, work(k)
        except ProtocolError:
            raise
        except (FedVCError, ArithmeticError, ValueError) as exc:
            logger.warning("Client %d failed this round: %s", k, exc)
            return k, None

    if threads > 1 and len(client_ids) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(client_ids))) as pool:
            outcomes = list(pool.map(guarded, client_ids))
    else:
        outcomes = [guarded(k) for k in client_ids]
    return {k: result for k, result in sorted(outcomes, key=lambda item: item[0]) if result is not None}


def require_results(results: Mapping[int, object], cohort: Sequence[int], round_index: int) -> None:
    if not results:
        raise RoundAborted(f"round {round_index}: all {len(cohort)} cohort clients failed")


# ----------------------------- local training --------------------------- #

def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(
    params: ParamSet,
    arch: ArchConfig,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    anchor: ParamSet | None = None,
    mu: float = 0.0,
) -> tuple[ParamSet, float]:
    """Minibatch SGD on cross-entropy, plus a proximal pull to ``anchor`` when ``mu > 0``.

    Returns the updated parameters and the mean batch loss.
    """
    if len(y) == 0:
        raise ProtocolError("local training needs at least one sample")
    losses = []
    for _ in range(epochs):
        for idx in minibatches(len(y), batch_size, rng):
            out = forward(params, arch, x[idx])
            loss = classification_loss(out.logits, y[idx])
            if anchor is not None and mu > 0:
                loss = loss + proximal_term(params, anchor, mu)
            params = sgd_step(params, backward(loss, params), lr)
            losses.append(loss.item())
    return params, float(np.mean(losses)) if losses else float("nan")


# ------------------------------- evaluation ----------------------------- #

def _evaluate_client(params: ParamSet, arch: ArchConfig, client: ClientState, split: str) -> tuple[float, float, float]:
    x, y = client.split(split)
    if len(y) == 0:
        raise MetricsError(f"client {client.client_id} has an empty {split} split")
    return classification_metrics(predict_proba(params, arch, x), y)


def evaluate_global(
    server: ServerState,
    clients: Sequence[ClientState],
    ctx: RoundContext,
    *,
    fine_tune: bool = False,
    run_id: str = "",
) -> list[MetricsRecord]:
    """Metrics for every client with the model it would be served.

    Fine-tuning trains a throw-away copy of the global model on the client's
    local training split and is refused for FedVC strategies. ``local_only``
    clients use their own model; held-out clients have none and are skipped.
    """
    if fine_tune:
        ctx.guard.check_finetune(ctx.strategy)

    def served_model(client: ClientState) -> ParamSet | None:
        if ctx.strategy.name == "local_only":
            return client.params
        if not fine_tune or ctx.strategy.finetune_epochs == 0:
            return server.params
        tuned, _ = train_classifier(
            server.params, server.arch, client.train_x, client.train_y,
            epochs=ctx.strategy.finetune_epochs,
            batch_size=ctx.config.batch_size,
            lr=ctx.config.lr_at(server.round),
            rng=client_rng(server.seed, server.round, client.client_id, FINETUNE_STREAM),
        )
        return tuned

    def work(k: int) -> list[MetricsRecord]:
        client = clients[k]
        params = served_model(client)
        if params is None:
            return []
        records = []
        for split in ctx.config.eval_splits:
            acc, auc, f1 = _evaluate_client(params, server.arch, client, split)
            records.append(MetricsRecord(
                run_id=run_id,
                round=server.round,
                strategy=ctx.strategy.name,
                client_id=client.client_id,
                group_id=client.group,
                role=client.role,
                split=split,
                accuracy=acc,
                weighted_auc=auc,
                weighted_f1=f1,
            ))
        return records

    start = time.perf_counter()
    ids = [c.client_id for c in clients]
    if ctx.threads > 1:
        with ThreadPoolExecutor(max_workers=ctx.threads) as pool:
            per_client = list(pool.map(work, ids))
    else:
        per_client = [work(k) for k in ids]
    records = [r for batch in per_client for r in batch]
    logger.debug("Evaluated %d clients in %.2fs", len(ids), time.perf_counter() - start)
    return records
