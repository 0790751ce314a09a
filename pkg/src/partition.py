"""Non-IID client partitions with held-out test groups.

Target shift: one class distribution per group is drawn from a symmetric
Dirichlet, every class is spread over the groups in proportion to it, and a
group's pool is split evenly among its clients. Feature shift: the base
dataset is dealt out to synthetic domains, each with its own fixed
transform, and every domain's samples go class-stratified to its clients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from src.datasets import Dataset
from src.errors import PartitionError

logger = logging.getLogger(__name__)

MODES = ("target_shift", "feature_shift")
TRAIN, TEST = "train", "test"
MAX_RETRIES = 10


@dataclass(frozen=True)
class ShiftConfig:
    mode: str = "target_shift"
    num_groups: int = 5
    alpha: float = 0.5
    clients_per_group: int = 8
    test_fraction: float = 0.2
    train_groups: int = 3
    num_domains: int = 5
    clients_per_domain: int = 6
    heldout_domains: int = 0
    mixed_clients: int = 5
    max_samples: int | None = None
    domain_offset: float = 2.0
    domain_noise: float = 0.3

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PartitionError(f"Unknown shift mode {self.mode!r}; expected one of {MODES}")
        if not self.alpha > 0:
            raise PartitionError(f"Dirichlet alpha must be positive, got {self.alpha}")
        if not 0.0 < self.test_fraction < 1.0:
            raise PartitionError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.num_groups < 1 or self.clients_per_group < 1:
            raise PartitionError("num_groups and clients_per_group must be >= 1")
        if not 1 <= self.train_groups <= self.num_groups:
            raise PartitionError(f"train_groups must lie in [1, {self.num_groups}], got {self.train_groups}")
        if not 0 <= self.heldout_domains < self.num_domains:
            raise PartitionError("heldout_domains must leave at least one training domain")
        if self.mixed_clients < 0:
            raise PartitionError("mixed_clients must be >= 0")
        if self.max_samples is not None and self.max_samples < 1:
            raise PartitionError("max_samples must be positive")


@dataclass
class ClientPartition:
    train_indices: list[np.ndarray]
    test_indices: list[np.ndarray]
    groups: np.ndarray
    roles: list[str]
    num_groups: int
    heldout_groups: tuple[int, ...] = ()
    allocated: np.ndarray | None = None
    expected_counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.train_indices = [np.asarray(i, dtype=np.int64) for i in self.train_indices]
        self.test_indices = [np.asarray(i, dtype=np.int64) for i in self.test_indices]
        self.groups = np.asarray(self.groups, dtype=np.int64)
        self.heldout_groups = tuple(int(g) for g in self.heldout_groups)

    @property
    def num_clients(self) -> int:
        return len(self.roles)

    @property
    def participants(self) -> list[int]:
        return [k for k, role in enumerate(self.roles) if role == TRAIN]

    @property
    def heldout(self) -> list[int]:
        return [k for k, role in enumerate(self.roles) if role == TEST]

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.concatenate([self.train_indices[client_id], self.test_indices[client_id]])

    def validate(self) -> None:
        n = self.num_clients
        if not (len(self.train_indices) == len(self.test_indices) == len(self.groups) == n):
            raise PartitionError("per-client lists have different lengths")
        if any(role not in (TRAIN, TEST) for role in self.roles):
            raise PartitionError(f"unknown client role in {sorted(set(self.roles))}")
        for k in range(n):
            if np.intersect1d(self.train_indices[k], self.test_indices[k]).size:
                raise PartitionError(f"client {k}: local train and test indices overlap")
        everything = np.concatenate([self.client_indices(k) for k in range(n)]) if n else np.zeros(0, np.int64)
        if np.unique(everything).size != everything.size:
            raise PartitionError("a sample is assigned to more than one client")
        if self.allocated is not None and not np.array_equal(np.sort(everything), np.sort(self.allocated)):
            raise PartitionError("client indices do not cover the allocated subset exactly")
        for g in range(self.num_groups):
            members = np.flatnonzero(self.groups == g)
            participating = [k for k in members if self.roles[k] == TRAIN]
            if g in self.heldout_groups and participating:
                raise PartitionError(f"held-out group {g} has participants {participating}")
            if g not in self.heldout_groups and len(members) and not participating:
                raise PartitionError(f"training group {g} has no participant")

    def group_histograms(self, ds: Dataset) -> np.ndarray:
        hist = np.zeros((self.num_groups, ds.num_classes), dtype=np.int64)
        for k in range(self.num_clients):
            hist[self.groups[k]] += ds.class_histogram(self.client_indices(k))
        return hist

    def to_manifest(self) -> dict:
        return {
            "num_groups": self.num_groups,
            "heldout_groups": list(self.heldout_groups),
            "clients": [
                {
                    "id": k,
                    "group": int(self.groups[k]),
                    "role": self.roles[k],
                    "train": self.train_indices[k].tolist(),
                    "test": self.test_indices[k].tolist(),
                }
                for k in range(self.num_clients)
            ],
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> ClientPartition:
        clients = sorted(manifest["clients"], key=lambda c: c["id"])
        return cls(
            train_indices=[c["train"] for c in clients],
            test_indices=[c["test"] for c in clients],
            groups=[c["group"] for c in clients],
            roles=[c["role"] for c in clients],
            num_groups=int(manifest["num_groups"]),
            heldout_groups=tuple(manifest.get("heldout_groups", ())),
        )

    def write_manifest(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_manifest(), sort_keys=False), encoding="utf-8")
        return path

    @classmethod
    def read_manifest(cls, path: Path) -> ClientPartition:
        return cls.from_manifest(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``weights`` (largest remainder)."""
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum() if weights.sum() > 0 else np.full(len(weights), 1.0 / len(weights))
    exact = weights * total
    counts = np.floor(exact).astype(np.int64)
    remainder = total - counts.sum()
    if remainder:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _local_split(indices: np.ndarray, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    indices = rng.permutation(indices)
    n = len(indices)
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1 if n > 1 else 0), max(n - 1, 0))
    return np.sort(indices[n_test:]), np.sort(indices[:n_test])


def _subsample(ds: Dataset, max_samples: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_samples is None or max_samples >= len(ds):
        return np.arange(len(ds))
    return np.sort(rng.choice(len(ds), size=max_samples, replace=False))


def dirichlet_label_partition(ds: Dataset, cfg: ShiftConfig, seed: int) -> ClientPartition:
    if cfg.mode != "target_shift":
        raise PartitionError(f"dirichlet_label_partition needs target_shift mode, got {cfg.mode!r}")
    rng = np.random.default_rng(seed)
    pool = _subsample(ds, cfg.max_samples, rng)
    num_classes = ds.num_classes

    for attempt in range(MAX_RETRIES + 1):
        q = rng.dirichlet(np.full(num_classes, cfg.alpha), size=cfg.num_groups)
        group_pools: list[list[np.ndarray]] = [[] for _ in range(cfg.num_groups)]
        expected = np.zeros((cfg.num_groups, num_classes))
        for c in range(num_classes):
            members = rng.permutation(pool[ds.labels[pool] == c])
            column = q[:, c] / q[:, c].sum()
            expected[:, c] = column * len(members)
            bounds = np.cumsum(apportion(len(members), column))[:-1]
            for g, chunk in enumerate(np.split(members, bounds)):
                group_pools[g].append(chunk)

        train_idx, test_idx, groups, roles = [], [], [], []
        failed = False
        for g in range(cfg.num_groups):
            members = rng.permutation(np.concatenate(group_pools[g]))
            if len(members) < cfg.clients_per_group:
                failed = True
                break
            for chunk in np.array_split(members, cfg.clients_per_group):
                tr, ts = _local_split(chunk, cfg.test_fraction, rng)
                train_idx.append(tr)
                test_idx.append(ts)
                groups.append(g)
                roles.append(TRAIN if g < cfg.train_groups else TEST)
        if failed:
            logger.warning("Dirichlet draw %d left a client without samples; redrawing", attempt + 1)
            continue

        partition = ClientPartition(
            train_indices=train_idx,
            test_indices=test_idx,
            groups=np.asarray(groups),
            roles=roles,
            num_groups=cfg.num_groups,
            heldout_groups=tuple(range(cfg.train_groups, cfg.num_groups)),
            allocated=pool,
            expected_counts=expected,
        )
        partition.validate()
        logger.info("Target-shift partition: %d clients in %d groups (%d training), %d samples",
                    partition.num_clients, cfg.num_groups, cfg.train_groups, len(pool))
        return partition
    raise PartitionError(f"no valid Dirichlet allocation after {MAX_RETRIES} retries (alpha={cfg.alpha})")


# ----------------------------- feature shift ----------------------------- #

@dataclass(frozen=True)
class DomainTransform:
    rotation: np.ndarray
    scale: float
    offset: np.ndarray
    noise_basis: np.ndarray

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = (x @ self.rotation) * self.scale + self.offset
        if self.noise_basis.size:
            out = out + rng.standard_normal((len(x), self.noise_basis.shape[1])) @ self.noise_basis.T
        return out


def domain_transforms(num_domains: int, dim: int, cfg: ShiftConfig, seed: int) -> list[DomainTransform]:
    """Domain 0 is the identity; the others are seeded orthogonal maps with shift and low-rank noise."""
    rng = np.random.default_rng(seed)
    transforms = [DomainTransform(np.eye(dim), 1.0, np.zeros(dim), np.zeros((dim, 0)))]
    rank = min(3, dim)
    for _ in range(1, num_domains):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        rotation = q * np.sign(np.diag(r))
        offset = rng.standard_normal(dim) * cfg.domain_offset / np.sqrt(dim)
        basis = np.linalg.qr(rng.standard_normal((dim, rank)))[0] * cfg.domain_noise
        transforms.append(DomainTransform(rotation, float(rng.uniform(0.7, 1.4)), offset, basis))
    return transforms


def _stratified_split(indices: np.ndarray, labels: np.ndarray, parts: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deal each class round-robin over ``parts`` so per-part label marginals match."""
    buckets: list[list[np.ndarray]] = [[] for _ in range(parts)]
    offset = 0
    for c in np.unique(labels[indices]):
        members = rng.permutation(indices[labels[indices] == c])
        for j in range(parts):
            buckets[(j + offset) % parts].append(members[j::parts])
        offset += len(members) % parts
    return [np.concatenate(b) if b else np.zeros(0, np.int64) for b in buckets]


def feature_shift_partition(base: Dataset, cfg: ShiftConfig, seed: int) -> tuple[Dataset, ClientPartition]:
    if cfg.mode != "feature_shift":
        raise PartitionError(f"feature_shift_partition needs feature_shift mode, got {cfg.mode!r}")
    if cfg.num_domains < 2:
        raise PartitionError(f"feature shift needs at least 2 domains, got {cfg.num_domains}")
    if cfg.clients_per_domain < 2:
        raise PartitionError("feature shift needs at least 2 clients per domain (one is held out)")
    rng = np.random.default_rng(seed)
    pool = _subsample(base, cfg.max_samples, rng)
    labels = base.labels

    domain_pools = _stratified_split(pool, labels, cfg.num_domains, rng)
    transforms = domain_transforms(cfg.num_domains, base.input_dim, cfg, seed + 1)
    features = base.features.astype(np.float64)
    domains = np.full(len(base), -1, dtype=np.int64)
    for d, members in enumerate(domain_pools):
        features[members] = transforms[d].apply(base.features[members].astype(np.float64), rng)
        domains[members] = d
    domains[domains < 0] = 0
    shifted = Dataset(features, labels, base.num_classes, domains)

    mixed_share = cfg.mixed_clients / (cfg.num_domains * cfg.clients_per_domain + cfg.mixed_clients)
    mixed_pool: list[np.ndarray] = []
    train_idx, test_idx, groups, roles = [], [], [], []
    first_heldout = cfg.num_domains - cfg.heldout_domains
    for d, members in enumerate(domain_pools):
        if cfg.mixed_clients:
            reserved, members = _take_share(members, labels, mixed_share, rng)
            mixed_pool.append(reserved)
        for j, chunk in enumerate(_stratified_split(members, labels, cfg.clients_per_domain, rng)):
            tr, ts = _local_split(chunk, cfg.test_fraction, rng)
            train_idx.append(tr)
            test_idx.append(ts)
            groups.append(d)
            training_domain = d < first_heldout
            roles.append(TRAIN if training_domain and j < cfg.clients_per_domain - 1 else TEST)

    heldout_groups = list(range(first_heldout, cfg.num_domains))
    num_groups = cfg.num_domains
    if cfg.mixed_clients:
        mixed = np.concatenate(mixed_pool)
        for chunk in _stratified_split(mixed, labels, cfg.mixed_clients, rng):
            tr, ts = _local_split(chunk, cfg.test_fraction, rng)
            train_idx.append(tr)
            test_idx.append(ts)
            groups.append(num_groups)
            roles.append(TEST)
        heldout_groups.append(num_groups)
        num_groups += 1

    partition = ClientPartition(
        train_indices=train_idx,
        test_indices=test_idx,
        groups=np.asarray(groups),
        roles=roles,
        num_groups=num_groups,
        heldout_groups=tuple(heldout_groups),
        allocated=pool,
    )
    partition.validate()
    logger.info("Feature-shift partition: %d domains, %d clients (%d participants), %d mixed test clients",
                cfg.num_domains, partition.num_clients, len(partition.participants), cfg.mixed_clients)
    return shifted, partition


def _take_share(
    members: np.ndarray, labels: np.ndarray, share: float, rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified (reserved, rest) split with ``share`` of each class reserved."""
    if len(members) == 0:
        return members, members
    reserved, rest = [], []
    for c in np.unique(labels[members]):
        cls = rng.permutation(members[labels[members] == c])
        k = int(round(share * len(cls)))
        reserved.append(cls[:k])
        rest.append(cls[k:])
    return np.concatenate(reserved), np.concatenate(rest)
