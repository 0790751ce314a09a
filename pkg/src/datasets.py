"""Datasets: synthetic Gaussian clusters and IDX (MNIST) files."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from src.errors import IdxFormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_UBYTE = 0x08


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domains: np.ndarray | None = None

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or len(features) != len(labels):
            raise ValueError(f"Dataset: features {features.shape} and labels {labels.shape} do not align")
        if np.isnan(features).any():
            raise ValueError("Dataset: features contain NaN")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"Dataset: labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.domains is not None:
            domains = np.asarray(self.domains, dtype=np.int64)
            if domains.shape != labels.shape:
                raise ValueError("Dataset: one domain id per sample is required")
            object.__setattr__(self, "domains", domains)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        domains = self.domains[indices] if self.domains is not None else None
        return Dataset(self.features[indices], self.labels[indices], self.num_classes, domains)

    def class_histogram(self, indices: np.ndarray | None = None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass(frozen=True)
class GenerativeParams:
    """Mixture the synthetic data was drawn from: unit-variance clusters, equal weights."""

    means: np.ndarray
    cluster_labels: np.ndarray
    num_classes: int
    sigma: float = 1.0


def _cluster_means(num_clusters: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    radius = separation * max(1.0, num_clusters ** (1.0 / dim))
    means: list[np.ndarray] = []
    attempts = 0
    while len(means) < num_clusters:
        attempts += 1
        if attempts > 10_000 * num_clusters:
            raise ValueError(f"could not place {num_clusters} clusters {separation} apart in {dim} dimensions")
        candidate = rng.uniform(-radius, radius, size=dim)
        if all(np.linalg.norm(candidate - m) >= separation for m in means):
            means.append(candidate)
    return np.stack(means)


def synth_gmm_dataset(
    num_classes: int,
    clusters_per_class: int,
    dim: int,
    separation: float,
    n: int,
    seed: int,
) -> tuple[Dataset, GenerativeParams]:
    """Labelled Gaussian clusters with means at least ``separation`` apart."""
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if n < num_classes:
        raise ValueError(f"need at least one sample per class: n={n}, num_classes={num_classes}")
    if clusters_per_class < 1 or dim < 1:
        raise ValueError("clusters_per_class and dim must be >= 1")
    rng = np.random.default_rng(seed)
    num_clusters = num_classes * clusters_per_class
    means = _cluster_means(num_clusters, dim, separation, rng)
    cluster_labels = np.repeat(np.arange(num_classes), clusters_per_class)

    counts = np.full(num_clusters, n // num_clusters)
    counts[: n % num_clusters] += 1
    assignment = np.repeat(np.arange(num_clusters), counts)
    features = means[assignment] + rng.standard_normal((n, dim))
    order = rng.permutation(n)
    dataset = Dataset(features[order], cluster_labels[assignment][order], num_classes)
    return dataset, GenerativeParams(means=means, cluster_labels=cluster_labels, num_classes=num_classes)


def bayes_predict(x: np.ndarray, generative: GenerativeParams) -> np.ndarray:
    """Bayes-optimal labels under the recorded mixture."""
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None, :] - generative.means[None, :, :]
    log_density = -0.5 * np.einsum("nkd,nkd->nk", diff, diff) / generative.sigma ** 2
    scores = np.full((len(x), generative.num_classes), -np.inf)
    for cls in range(generative.num_classes):
        scores[:, cls] = logsumexp(log_density[:, generative.cluster_labels == cls], axis=1)
    return scores.argmax(axis=1)


# ------------------------------- IDX files ------------------------------- #

def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def read_idx(path: Path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    with _open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError(str(path), len(blob), "truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxFormatError(str(path), 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise IdxFormatError(str(path), len(blob), "truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    available = len(blob) - header_end
    if available < expected:
        raise IdxFormatError(str(path), len(blob), f"truncated payload: expected {expected} bytes, found {available}")
    if available > expected:
        logger.warning("%s: %d trailing bytes ignored", path, available - expected)
    return np.frombuffer(blob, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)


def write_idx(path: Path, array: np.ndarray) -> Path:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"write_idx only writes unsigned bytes, got {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">I", (_UBYTE << 8) | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with _open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(arr).tobytes())
    return path


def load_idx(images_path: Path, labels_path: Path, num_classes: int = 10) -> Dataset:
    """Images scaled to [0, 1] and flattened to (N, rows * cols)."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(str(labels_path), 4, f"count mismatch: {len(images)} images vs {len(labels)} labels")
    features = images.reshape(len(images), -1).astype(np.float32) / 255.0
    logger.info("Loaded %d IDX samples of dimension %d from %s", len(labels), features.shape[1], images_path)
    return Dataset(features, labels.astype(np.int64), num_classes)
