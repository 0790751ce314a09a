"""Training objectives.

``em_loss`` is the local objective of the EM variant: classification plus
the preference term with concepts held constant. ``unified_loss`` trains
model and concepts together; stop-gradients route the first preference term
to the model only and the gamma-weighted term to the concepts only. All
terms are batch means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.concepts import ConceptBank, relevance_op
from src.errors import LossError
from src.model import ModelOutput
from src.tensor import ParamSet, Tensor, log_softmax, stop_gradient

logger = logging.getLogger(__name__)

MODES = ("em", "unified")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.1
    mode: str = "em"

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise LossError(f"gamma must be non-negative, got {self.gamma}")
        if self.mode not in MODES:
            raise LossError(f"Unknown loss mode {self.mode!r}; expected one of {MODES}")


@dataclass
class LossTerms:
    """Scalar loss plus its pieces; ``relevance`` feeds the streaming statistics."""

    total: Tensor
    classification: float
    preference: float
    concept: float
    relevance: np.ndarray


def _check_labels(labels: np.ndarray, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise LossError(f"labels have shape {labels.shape}, expected ({batch},)")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise LossError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LossError(f"label out of range [0, {num_classes}): min={labels.min()}, max={labels.max()}")
    return labels.astype(np.int64)


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross-entropy, mean over the batch."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise LossError(f"logits must be a non-empty (B, classes) matrix, got {logits.shape}")
    batch, num_classes = logits.shape
    labels = _check_labels(labels, batch, num_classes)
    one_hot = np.zeros(logits.shape, dtype=logits.dtype)
    one_hot[np.arange(batch), labels] = 1.0
    picked = (log_softmax(logits, axis=1) * Tensor(one_hot)).sum()
    return picked * (-1.0 / batch)


def preference_loss(p_hat: Tensor, p: Tensor) -> Tensor:
    """Squared Euclidean distance, mean over rows; ``p`` may be a single row."""
    if p_hat.ndim == 1:
        p_hat = p_hat.reshape(1, p_hat.shape[0])
    if p.ndim == 1:
        p = p.reshape(1, p.shape[0])
    if p_hat.shape[1] != p.shape[1] or p.shape[0] not in (1, p_hat.shape[0]):
        raise LossError(f"preference_loss: dimension mismatch {p_hat.shape} vs {p.shape}")
    return (p_hat - p).square().sum(axis=1).mean()


def em_loss(out: ModelOutput, labels: np.ndarray, bank: ConceptBank, upsilon: np.ndarray) -> LossTerms:
    """Classification plus preference matching against fixed concepts."""
    concepts = Tensor(bank.concepts)
    s = relevance_op(out.embedding, concepts, upsilon, bank.iota)
    p_hat = s @ concepts
    p = Tensor(np.asarray(upsilon, dtype=np.float64) @ bank.concepts)
    cls = classification_loss(out.logits, labels)
    pref = preference_loss(p_hat, p)
    return LossTerms(
        total=cls + pref,
        classification=cls.item(),
        preference=pref.item(),
        concept=0.0,
        relevance=s.data,
    )


def unified_loss(
    out: ModelOutput,
    labels: np.ndarray,
    bank: ConceptBank,
    upsilon: np.ndarray,
    cfg: LossConfig,
    concepts: Tensor | None = None,
) -> LossTerms:
    """Joint objective ``l_cls + l_p(p_hat, sg[p]) + gamma * l_p(sg[p_hat], p)``.

    ``concepts`` is the live concept tensor gradients should reach; a fresh
    one is built from ``bank`` when omitted. ``upsilon`` is a constant.
    """
    if cfg.mode != "unified":
        raise LossError(f"unified_loss needs mode 'unified', got {cfg.mode!r}")
    if concepts is None:
        concepts = Tensor(bank.concepts, requires_grad=True)
    frozen = stop_gradient(concepts)
    s = relevance_op(out.embedding, frozen, upsilon, bank.iota)
    p_hat = s @ frozen
    p = Tensor(np.asarray(upsilon, dtype=np.float64).reshape(1, -1)) @ concepts

    cls = classification_loss(out.logits, labels)
    pref = preference_loss(p_hat, stop_gradient(p))
    concept = preference_loss(stop_gradient(p_hat), p)
    return LossTerms(
        total=cls + pref + concept * cfg.gamma,
        classification=cls.item(),
        preference=pref.item(),
        concept=concept.item(),
        relevance=s.data,
    )


def proximal_term(params: ParamSet, anchor: ParamSet, mu: float) -> Tensor:
    """``(mu / 2) * |w - w_anchor|^2`` with the anchor held constant."""
    if mu < 0:
        raise LossError(f"proximal coefficient must be non-negative, got {mu}")
    params.check_compatible(anchor, "proximal_term")
    total: Tensor | None = None
    for name, weight in params.items():
        term = (weight - Tensor(anchor[name].data)).square().sum()
        total = term if total is None else total + term
    if total is None:
        raise LossError("proximal_term: empty parameter set")
    return total * (0.5 * mu)
