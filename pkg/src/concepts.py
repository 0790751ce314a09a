"""Virtual concepts, client preference weights and their EM updates.

A ``ConceptBank`` holds M concept vectors of dimension d. Each client owns a
length-M weight vector ``upsilon`` (its mixture weights) and its preference
is ``p = upsilon @ C``. Samples are softly assigned to concepts by their
relevance::

    s[i, m] = upsilon[m] exp(-iota |z_i - c_m|^2) / sum_m' (...)

Full-batch EM (``em_m_step``) and its minibatch counterpart based on
exponential moving averages (``accumulate_minibatch``, ``finalize_upsilon``,
``merge_concepts``) share the same statistics: responsibility mass S,
responsibility-weighted embedding sums and an effective sample count N.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.special import softmax as _softmax
from sklearn.cluster import kmeans_plusplus

from src.errors import ConceptError
from src.tensor import Tensor, softmax

logger = logging.getLogger(__name__)

DEFAULT_IOTA = 0.1
DEFAULT_KAPPA = 0.05
MASS_EPS = 1e-12
SUM_TOL = 1e-6


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ConceptBank:
    concepts: np.ndarray
    iota: float = DEFAULT_IOTA

    def __post_init__(self) -> None:
        concepts = _readonly(self.concepts)
        if concepts.ndim != 2 or concepts.shape[0] < 1 or concepts.shape[1] < 1:
            raise ConceptError(f"concepts must be an (M, d) matrix with M, d >= 1, got shape {concepts.shape}")
        if not np.all(np.isfinite(concepts)):
            raise ConceptError("concepts contain non-finite values")
        if not self.iota > 0:
            raise ConceptError(f"iota must be positive, got {self.iota}")
        object.__setattr__(self, "concepts", concepts)

    @property
    def num_concepts(self) -> int:
        return self.concepts.shape[0]

    @property
    def dim(self) -> int:
        return self.concepts.shape[1]

    def with_concepts(self, concepts: np.ndarray) -> ConceptBank:
        return replace(self, concepts=concepts)


def init_bank(num_concepts: int, dim: int, iota: float = DEFAULT_IOTA, seed: int = 0, scale: float = 0.1) -> ConceptBank:
    if num_concepts < 1 or dim < 1:
        raise ConceptError(f"num_concepts and dim must be >= 1, got {num_concepts}, {dim}")
    rng = np.random.default_rng(seed)
    return ConceptBank(rng.standard_normal((num_concepts, dim)) * scale, iota=iota)


def init_bank_kmeanspp(embeddings: np.ndarray, num_concepts: int, iota: float = DEFAULT_IOTA, seed: int = 0) -> ConceptBank:
    """Seed concepts with k-means++ over a pool of embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) < num_concepts:
        raise ConceptError(f"k-means++ needs at least {num_concepts} embeddings, got {len(embeddings)}")
    centers, _ = kmeans_plusplus(embeddings, n_clusters=num_concepts, random_state=seed)
    return ConceptBank(centers, iota=iota)


def load_bank(path: Path, iota: float = DEFAULT_IOTA) -> ConceptBank:
    """Load pre-defined concepts from ``.npy`` or a header-less CSV."""
    path = Path(path)
    if not path.exists():
        raise ConceptError(f"Concept file not found: {path}")
    if path.suffix == ".npy":
        values = np.load(path)
    else:
        values = pd.read_csv(path, header=None).to_numpy(dtype=np.float64)
    return ConceptBank(np.atleast_2d(values), iota=iota)


def uniform_upsilon(num_concepts: int) -> np.ndarray:
    return np.full(num_concepts, 1.0 / num_concepts)


def _check_upsilon(upsilon: np.ndarray, num_concepts: int, op: str) -> np.ndarray:
    upsilon = np.asarray(upsilon, dtype=np.float64)
    if upsilon.shape != (num_concepts,):
        raise ConceptError(f"{op}: upsilon has shape {upsilon.shape}, expected ({num_concepts},)")
    if np.any(upsilon < 0) or not np.all(np.isfinite(upsilon)):
        raise ConceptError(f"{op}: upsilon must be finite and non-negative")
    total = upsilon.sum()
    if total <= 0:
        raise ConceptError(f"{op}: upsilon is all zero, relevance is undefined")
    if abs(total - 1.0) > SUM_TOL:
        raise ConceptError(f"{op}: upsilon sums to {total:.8f}, expected 1")
    return upsilon


def _check_embeddings(z: np.ndarray, dim: int, op: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != dim:
        raise ConceptError(f"{op}: embeddings have shape {z.shape}, expected (B, {dim})")
    if not np.all(np.isfinite(z)):
        raise ConceptError(f"{op}: embeddings contain non-finite values")
    return z


def squared_distances(z: np.ndarray, concepts: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - concepts[None, :, :]
    return np.einsum("bmd,bmd->bm", diff, diff)


@dataclass(frozen=True)
class ClientPreference:
    """A client's concept weights; the preference vector is derived on demand."""

    upsilon: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "upsilon", _readonly(self.upsilon))

    @classmethod
    def uniform(cls, num_concepts: int) -> ClientPreference:
        return cls(uniform_upsilon(num_concepts))

    def preference(self, bank: ConceptBank) -> np.ndarray:
        return client_preference(self.upsilon, bank)


def relevance(z_batch: np.ndarray, bank: ConceptBank, upsilon: np.ndarray) -> np.ndarray:
    upsilon = _check_upsilon(upsilon, bank.num_concepts, "relevance")
    z = _check_embeddings(z_batch, bank.dim, "relevance")
    with np.errstate(divide="ignore"):
        log_weights = np.log(upsilon)
    logits = log_weights[None, :] - bank.iota * squared_distances(z, bank.concepts)
    return _softmax(logits, axis=1)


def nearest_concept(z_batch: np.ndarray, bank: ConceptBank) -> np.ndarray:
    """Index of the closest concept per row; ties go to the lowest index."""
    z = _check_embeddings(z_batch, bank.dim, "nearest_concept")
    return np.argmin(squared_distances(z, bank.concepts), axis=1)


def relevance_op(z: Tensor, concepts: Tensor, upsilon: np.ndarray, iota: float) -> Tensor:
    """Graph version of ``relevance``; differentiable in ``z`` and ``concepts``."""
    batch, dim = z.shape
    num_concepts = concepts.shape[0]
    upsilon = _check_upsilon(upsilon, num_concepts, "relevance_op")
    with np.errstate(divide="ignore"):
        log_weights = Tensor(np.log(upsilon)[None, :])
    diff = z.reshape(batch, 1, dim) - concepts.reshape(1, num_concepts, dim)
    sq = diff.square().sum(axis=2)
    return softmax(log_weights - sq * float(iota), axis=1)


def client_preference(upsilon: np.ndarray, bank: ConceptBank) -> np.ndarray:
    upsilon = np.asarray(upsilon, dtype=np.float64)
    if upsilon.shape != (bank.num_concepts,):
        raise ConceptError(f"client_preference: upsilon has length {upsilon.shape}, expected {bank.num_concepts}")
    return upsilon @ bank.concepts


def estimated_preference(s: np.ndarray, bank: ConceptBank) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != bank.num_concepts:
        raise ConceptError(f"estimated_preference: relevance has {s.shape[-1]} columns, expected {bank.num_concepts}")
    return s @ bank.concepts


def gmm_log_likelihood(
    embeddings: Sequence[np.ndarray],
    bank: ConceptBank,
    upsilons: Sequence[np.ndarray],
) -> float:
    """Sum over clients and samples of log sum_m upsilon_m N(z; c_m, I)."""
    if len(embeddings) != len(upsilons):
        raise ConceptError("gmm_log_likelihood: one upsilon per client is required")
    if not embeddings or sum(len(z) for z in embeddings) == 0:
        raise ConceptError("gmm_log_likelihood: empty data")
    log_norm = -0.5 * bank.dim * np.log(2.0 * np.pi)
    total = 0.0
    for z, upsilon in zip(embeddings, upsilons):
        if len(z) == 0:
            continue
        upsilon = _check_upsilon(upsilon, bank.num_concepts, "gmm_log_likelihood")
        z = _check_embeddings(z, bank.dim, "gmm_log_likelihood")
        with np.errstate(divide="ignore"):
            log_comp = np.log(upsilon)[None, :] - 0.5 * squared_distances(z, bank.concepts) + log_norm
        total += float(logsumexp(log_comp, axis=1).sum())
    return total


def em_m_step(
    responsibilities: Sequence[np.ndarray],
    embeddings: Sequence[np.ndarray],
    bank: ConceptBank,
) -> tuple[list[np.ndarray], ConceptBank]:
    """Closed-form M-step: per-client mean responsibilities and pooled weighted means.

    A concept whose total responsibility mass is below 1e-12 keeps its
    previous value.
    """
    if len(responsibilities) != len(embeddings) or not responsibilities:
        raise ConceptError("em_m_step: need matching, non-empty responsibility and embedding lists")
    mass = np.zeros(bank.num_concepts)
    weighted = np.zeros_like(bank.concepts)
    upsilons = []
    for s, z in zip(responsibilities, embeddings):
        s = np.asarray(s, dtype=np.float64)
        z = _check_embeddings(z, bank.dim, "em_m_step")
        if len(s) == 0 or len(s) != len(z):
            raise ConceptError("em_m_step: every client needs as many responsibility rows as embeddings (> 0)")
        if not np.allclose(s.sum(axis=1), 1.0, atol=SUM_TOL):
            raise ConceptError("em_m_step: responsibilities are not row-stochastic")
        upsilons.append(s.mean(axis=0))
        mass += s.sum(axis=0)
        weighted += s.T @ z
    return upsilons, bank.with_concepts(_ratio_or_previous(weighted, mass, bank.concepts))


def _ratio_or_previous(weighted: np.ndarray, mass: np.ndarray, previous: np.ndarray) -> np.ndarray:
    alive = mass > MASS_EPS
    if not np.all(alive):
        logger.warning("Concepts %s have no responsibility mass; keeping previous values",
                       np.flatnonzero(~alive).tolist())
    safe = np.where(alive, mass, 1.0)
    return np.where(alive[:, None], weighted / safe[:, None], previous)


def em_fit(
    embeddings: Sequence[np.ndarray],
    bank: ConceptBank,
    upsilons: Sequence[np.ndarray] | None = None,
    iterations: int = 20,
) -> tuple[ConceptBank, list[np.ndarray], list[float]]:
    """Alternate E- and M-steps; returns the log-likelihood after each step."""
    current = list(upsilons) if upsilons is not None else [uniform_upsilon(bank.num_concepts) for _ in embeddings]
    trace = [gmm_log_likelihood(embeddings, bank, current)]
    for _ in range(iterations):
        resp = [relevance(z, bank, u) for z, u in zip(embeddings, current)]
        current, bank = em_m_step(resp, embeddings, bank)
        trace.append(gmm_log_likelihood(embeddings, bank, current))
    return bank, current, trace


# ------------------------ streaming statistics ------------------------ #

@dataclass(frozen=True)
class StreamStats:
    s_sum: np.ndarray
    c_sum: np.ndarray
    count: float
    kappa: float = DEFAULT_KAPPA
    batches: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.kappa <= 1.0:
            raise ConceptError(f"kappa must lie in [0, 1], got {self.kappa}")
        object.__setattr__(self, "s_sum", _readonly(self.s_sum))
        object.__setattr__(self, "c_sum", _readonly(self.c_sum))

    @classmethod
    def initial(cls, bank: ConceptBank, kappa: float = DEFAULT_KAPPA, pseudo_count: float = 1.0) -> StreamStats:
        """Uniform pseudo-count prior centred on the current concepts."""
        s = np.full(bank.num_concepts, pseudo_count / bank.num_concepts)
        return cls(s_sum=s, c_sum=bank.concepts * s[:, None], count=pseudo_count, kappa=kappa)

    @property
    def nbytes(self) -> int:
        return int(self.s_sum.nbytes + self.c_sum.nbytes + 8)


def accumulate_minibatch(stats: StreamStats, s_batch: np.ndarray, z_batch: np.ndarray) -> StreamStats:
    s = np.asarray(s_batch, dtype=np.float64)
    z = np.asarray(z_batch, dtype=np.float64)
    if len(s) == 0:
        raise ConceptError("accumulate_minibatch: empty batch")
    if len(s) != len(z) or s.shape[1] != stats.s_sum.shape[0] or z.shape[1] != stats.c_sum.shape[1]:
        raise ConceptError(f"accumulate_minibatch: shapes {s.shape} and {z.shape} do not match the statistics")
    k = stats.kappa
    return replace(
        stats,
        s_sum=stats.s_sum * k + s.sum(axis=0) * (1.0 - k),
        c_sum=stats.c_sum * k + (s.T @ z) * (1.0 - k),
        count=stats.count * k + len(s) * (1.0 - k),
        batches=stats.batches + 1,
    )


def finalize_upsilon(stats: StreamStats) -> np.ndarray:
    if stats.count <= 0:
        raise ConceptError("finalize_upsilon: effective count is zero")
    upsilon = stats.s_sum / stats.count
    total = upsilon.sum()
    if total <= 0:
        raise ConceptError("finalize_upsilon: responsibility mass is zero")
    return upsilon / total


def merge_concepts(stats_list: Sequence[StreamStats], bank: ConceptBank) -> ConceptBank:
    """Server-side concept update from the cohort's streaming statistics.

    Statistics are summed in the order given (callers pass them sorted by
    client id) in 64-bit precision.
    """
    if not stats_list:
        raise ConceptError("merge_concepts: no client statistics")
    mass = np.zeros(bank.num_concepts)
    weighted = np.zeros_like(bank.concepts)
    for stats in stats_list:
        mass += stats.s_sum
        weighted += stats.c_sum
    return bank.with_concepts(_ratio_or_previous(weighted, mass, bank.concepts))
