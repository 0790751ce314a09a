"""Evaluation metrics, group-wise summaries and preference projections."""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score, f1_score, roc_auc_score

from src.errors import MetricsError

logger = logging.getLogger(__name__)

ROLES = ("train", "test")
SPLITS = ("local_train", "local_test")


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    round: int
    strategy: str
    client_id: int
    group_id: int
    role: str
    split: str
    accuracy: float
    weighted_auc: float
    weighted_f1: float

    def __post_init__(self) -> None:
        for name in ("accuracy", "weighted_auc", "weighted_f1"):
            value = getattr(self, name)
            # NaN marks an undefined AUC (single-class test split)
            if not np.isnan(value) and not 0.0 <= value <= 1.0:
                raise MetricsError(f"{name}={value} is outside [0, 1]")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _paired(preds: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(preds) != len(labels):
        raise MetricsError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise MetricsError("empty input")
    return preds, labels


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    preds, labels = _paired(preds, labels)
    return float(np.mean(preds == labels))


def weighted_auc(scores: np.ndarray, labels: np.ndarray, *, warn_absent: bool = True) -> float:
    """One-vs-rest AUC per class present in ``labels``, weighted by class support.

    Classes that have a score column but no sample are left out and the
    remaining weights renormalise.
    """
    scores, labels = _paired(np.asarray(scores, dtype=np.float64), labels)
    if scores.ndim != 2:
        raise MetricsError(f"scores must be (N, classes), got {scores.shape}")
    present = np.unique(labels)
    if len(present) < 2:
        raise MetricsError("weighted AUC needs at least two classes in labels")
    absent = sorted(set(range(scores.shape[1])) - set(present.tolist()))
    if absent and warn_absent:
        logger.warning("Classes %s absent from labels; excluded from weighted AUC", absent)
    support = np.array([(labels == c).sum() for c in present], dtype=np.float64)
    aucs = np.array([roc_auc_score(labels == c, scores[:, c]) for c in present])
    # a weighted mean of values in [0, 1] can round past 1.0
    return float(np.clip(np.dot(support / support.sum(), aucs), 0.0, 1.0))


def weighted_f1(preds: np.ndarray, labels: np.ndarray) -> float:
    preds, labels = _paired(preds, labels)
    return float(np.clip(f1_score(labels, preds, average="weighted", zero_division=0), 0.0, 1.0))


def classification_metrics(proba: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    """(accuracy, weighted AUC, weighted F1); AUC is NaN when it is undefined."""
    preds = np.asarray(proba).argmax(axis=1)
    try:
        auc = weighted_auc(proba, labels, warn_absent=False)
    except MetricsError:
        auc = float("nan")
    return accuracy(preds, labels), auc, weighted_f1(preds, labels)


def groupwise_summary(records: Iterable[MetricsRecord], metric: str = "accuracy") -> pd.DataFrame:
    """Mean and population standard deviation of ``metric`` per (strategy, group, round)."""
    frame = pd.DataFrame([vars(r) for r in records])
    if frame.empty:
        raise MetricsError("groupwise_summary needs at least one record")
    grouped = frame.groupby(["strategy", "group_id", "round"])[metric]
    summary = grouped.agg(mean="mean", std=lambda s: float(np.std(s, ddof=0)), clients="count")
    return summary.reset_index()


def project_preferences(p_hat: np.ndarray) -> np.ndarray:
    """2-D PCA coordinates with a deterministic sign per axis."""
    x = np.asarray(p_hat, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise MetricsError(f"projection needs at least 2 samples of dimension >= 2, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = eigvecs[:, np.argsort(eigvals, kind="stable")[::-1][:2]]
    pivots = np.abs(top).argmax(axis=0)
    signs = np.sign(top[pivots, np.arange(2)])
    signs[signs == 0] = 1.0
    return centered @ (top * signs)


def preference_cluster_agreement(p_hat: np.ndarray, groups: np.ndarray, seed: int = 0) -> float:
    """Adjusted Rand index between k-means clusters of ``p_hat`` and the true groups."""
    x = np.asarray(p_hat, dtype=np.float64)
    groups = np.asarray(groups)
    if len(x) != len(groups):
        raise MetricsError("p_hat and groups differ in length")
    k = len(np.unique(groups))
    if k < 2:
        raise MetricsError("cluster agreement needs at least two groups")
    if len(np.unique(x, axis=0)) < k:
        raise MetricsError("degenerate preferences: fewer distinct points than groups")
    clusters = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(x)
    return float(adjusted_rand_score(groups, clusters))
