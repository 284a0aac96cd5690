"""Datasets and the six client-partitioning regimes.

Partition kinds:
    iid    -- equal shard sizes, per-class proportions equal (+-1 sample)
    dir    -- per-label Dirichlet(alpha) allocation across clients
    prob   -- group-based label skew: a sample goes to its primary group
              with probability q, else uniformly to one of the other groups
    qty    -- each client holds samples from exactly k distinct labels
    noise  -- equal split, client i's features perturbed with
              Gaussian noise of std sigma*(i+1)/n_clients (materialized)
    qs     -- quantity skew: shard sizes from Dirichlet(beta), contents iid

All partitioners are pure seeded functions over immutable datasets.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import ConfigError

_RESAMPLE_ATTEMPTS = 100

PARTITION_KINDS = ("iid", "dir", "prob", "qty", "noise", "qs")


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncation, count mismatch)."""


class PartitionError(RuntimeError):
    """Partitioning could not satisfy its contract (e.g. empty shards)."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) in [0,1]-ish range plus integer labels < class_count."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if len(self.features) < 1 or len(self.features) != len(self.labels):
            raise ConfigError("dataset needs matching, nonempty features and labels")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("dataset features must be finite")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigError("labels must lie in [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PartitionSpec:
    """Which regime to use and its parameter; defaults follow common practice."""

    kind: str = "iid"
    dir_alpha: float = 0.3
    prob_q: float = 0.3
    qty_k: int = 2
    noise_sigma: float = 0.5
    qs_beta: float = 0.5

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ConfigError(f"unknown partition kind {self.kind!r}")
        if self.dir_alpha <= 0 or self.qs_beta <= 0:
            raise ConfigError("Dirichlet concentration parameters must be > 0")
        if self.qty_k < 1:
            raise ConfigError("qty_k must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class ClientShard:
    """Sample indices owned by one client; noise kind materializes features."""

    client_id: int
    indices: np.ndarray
    features_override: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.indices)


def shard_data(ds: Dataset, shard: ClientShard) -> tuple[np.ndarray, np.ndarray]:
    """The (features, labels) arrays a client actually trains on."""
    if shard.features_override is not None:
        return shard.features_override, ds.labels[shard.indices]
    return ds.features[shard.indices], ds.labels[shard.indices]


# ---------------------------------------------------------------------------
# Loading / generation
# ---------------------------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated IDX image header")
    magic, n, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != _IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}")
    if len(raw) != 16 + n * rows * cols:
        raise IdxFormatError(f"{path}: payload size mismatch")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def _read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated IDX label header")
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != _IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(raw) != 8 + n:
        raise IdxFormatError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files (pixels scaled to [0, 1])."""
    features = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if len(features) != len(labels):
        raise IdxFormatError(
            f"image count {len(features)} != label count {len(labels)}"
        )
    return Dataset(features, labels, class_count=int(labels.max()) + 1)


def gen_blobs(classes: int, dim: int, per_class: int, spread: float, seed) -> Dataset:
    """Seeded Gaussian clusters with centers inside the unit feature box.

    Features are clipped to [0, 1] so image-style triggers (fixed pixel
    values) apply unchanged.
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    if classes < 1 or dim < 1:
        raise ConfigError("classes and dim must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.15, 0.85, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    features = centers[labels] + rng.normal(0.0, spread, size=(len(labels), dim))
    np.clip(features, 0.0, 1.0, out=features)
    perm = rng.permutation(len(labels))
    return Dataset(features[perm], labels[perm], classes)


def stratified_split(ds: Dataset, counts: Sequence[int], seed) -> list[np.ndarray]:
    """Disjoint index pools with per-pool class balance (largest remainder).

    Used to carve train / test / auxiliary pools out of one dataset so the
    defense's auxiliary data never overlaps evaluation data.
    """
    counts = [int(c) for c in counts]
    if sum(counts) > len(ds):
        raise ConfigError("split counts exceed dataset size")
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.class_count)]
    class_fracs = np.array([len(ix) for ix in by_class], dtype=np.float64) / len(ds)
    offsets = [0] * ds.class_count
    pools = []
    for want in counts:
        take = _largest_remainder(class_fracs, want)
        chunk = []
        for c in range(ds.class_count):
            got = min(take[c], len(by_class[c]) - offsets[c])
            chunk.append(by_class[c][offsets[c] : offsets[c] + got])
            offsets[c] += got
        pool = np.concatenate(chunk)
        pools.append(pool[rng.permutation(len(pool))])
    return pools


def subset(ds: Dataset, indices: np.ndarray) -> Dataset:
    return Dataset(ds.features[indices], ds.labels[indices], ds.class_count)


# ---------------------------------------------------------------------------
# Partitioners
# ---------------------------------------------------------------------------


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = weights / weights.sum() * total if weights.sum() > 0 else np.full_like(weights, total / len(weights))
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _deal(indices: np.ndarray, n_bins: int, start: int) -> list[np.ndarray]:
    """Deal indices one-by-one to bins, starting at ``start`` (card dealing)."""
    bins = [[] for _ in range(n_bins)]
    for j, ix in enumerate(indices):
        bins[(start + j) % n_bins].append(ix)
    return [np.asarray(b, dtype=np.int64) for b in bins]


def _split_iid(ds: Dataset, n_clients: int, rng) -> list[list[np.ndarray]]:
    per_client = [[] for _ in range(n_clients)]
    start = 0
    for c in range(ds.class_count):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        for i, chunk in enumerate(_deal(idx, n_clients, start)):
            per_client[i].append(chunk)
        start = (start + len(idx)) % n_clients
    return per_client


def _partition_once(ds: Dataset, spec: PartitionSpec, n_clients: int, rng) -> list[np.ndarray]:
    kind = spec.kind
    per_client: list[list[np.ndarray]] = [[] for _ in range(n_clients)]

    if kind in ("iid", "noise"):
        per_client = _split_iid(ds, n_clients, rng)

    elif kind == "dir":
        for c in range(ds.class_count):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            props = rng.dirichlet(np.full(n_clients, spec.dir_alpha))
            counts = _largest_remainder(props, len(idx))
            off = 0
            for i in range(n_clients):
                per_client[i].append(idx[off : off + counts[i]])
                off += counts[i]

    elif kind == "prob":
        groups = min(n_clients, ds.class_count)
        q = spec.prob_q
        if not (1.0 / groups - 1e-12 <= q <= 1.0):
            raise ConfigError(f"prob_q must lie in [1/{groups}, 1]")
        members = [np.flatnonzero(np.arange(n_clients) % groups == g) for g in range(groups)]
        u = rng.random(len(ds))
        other_pick = rng.integers(0, max(groups - 1, 1), size=len(ds))
        member_pick = rng.random(len(ds))
        for j in range(len(ds)):
            primary = int(ds.labels[j]) % groups
            if groups == 1 or u[j] < q:
                g = primary
            else:
                g = int(other_pick[j])
                if g >= primary:
                    g += 1
            clients = members[g]
            per_client[clients[int(member_pick[j] * len(clients))]].append(
                np.array([j], dtype=np.int64)
            )

    elif kind == "qty":
        k, c = spec.qty_k, ds.class_count
        if k > c:
            raise ConfigError("qty_k cannot exceed the number of classes")
        owned = [[(i * k + j) % c for j in range(k)] for i in range(n_clients)]
        owners = [[] for _ in range(c)]
        for i, labs in enumerate(owned):
            for l in labs:
                owners[l].append(i)
        for l in range(c):
            if not owners[l]:
                # not coverable when n_clients*k < c; those samples stay unassigned
                continue
            idx = rng.permutation(np.flatnonzero(ds.labels == l))
            if len(idx) < len(owners[l]):
                raise PartitionError(f"label {l} has too few samples for its owners")
            for owner, chunk in zip(owners[l], _deal(idx, len(owners[l]), 0)):
                per_client[owner].append(chunk)

    elif kind == "qs":
        props = rng.dirichlet(np.full(n_clients, spec.qs_beta))
        sizes = _largest_remainder(props, len(ds))
        perm = rng.permutation(len(ds))
        off = 0
        for i in range(n_clients):
            per_client[i].append(perm[off : off + sizes[i]])
            off += sizes[i]

    else:  # pragma: no cover - guarded by PartitionSpec
        raise ConfigError(f"unknown partition kind {kind!r}")

    return [
        np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        for chunks in per_client
    ]


def partition(ds: Dataset, spec: PartitionSpec, n_clients: int, seed) -> list[ClientShard]:
    """Split a dataset into per-client shards according to ``spec``.

    Deterministic per seed. Kinds with random allocations (dir, prob, qs)
    are resampled up to 100 times if any client would end up empty.
    """
    if n_clients < 2:
        raise ConfigError("need at least 2 clients")
    rng = np.random.default_rng(seed)
    for _ in range(_RESAMPLE_ATTEMPTS):
        assign = _partition_once(ds, spec, n_clients, rng)
        if all(len(a) > 0 for a in assign):
            break
    else:
        raise PartitionError(
            f"{spec.kind}: empty shard persisted after {_RESAMPLE_ATTEMPTS} resamples"
        )

    if spec.kind == "noise":
        shards = []
        for i, idx in enumerate(assign):
            sigma_i = spec.noise_sigma * (i + 1) / n_clients
            noisy = ds.features[idx] + rng.normal(0.0, sigma_i, size=(len(idx), ds.dim))
            shards.append(ClientShard(i, idx, features_override=noisy))
        return shards
    return [ClientShard(i, idx) for i, idx in enumerate(assign)]


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShardStats:
    client_id: int
    size: int
    label_histogram: np.ndarray


def shard_stats(shards: Sequence[ClientShard], ds: Dataset) -> list[ShardStats]:
    out = []
    for shard in shards:
        hist = np.bincount(ds.labels[shard.indices], minlength=ds.class_count)
        out.append(ShardStats(shard.client_id, len(shard), hist))
    return out


def write_shard_stats_csv(shards: Sequence[ClientShard], ds: Dataset, path) -> None:
    stats = shard_stats(shards, ds)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["client_id", "size"] + [f"label_{c}" for c in range(ds.class_count)]
        )
        for s in stats:
            writer.writerow([s.client_id, s.size] + [int(v) for v in s.label_histogram])


# ---------------------------------------------------------------------------
# Normalized non-iid degree
# ---------------------------------------------------------------------------


def noniid_degree_spec(
    kind: str, degree: float, class_count: int, n_clients: int
) -> PartitionSpec:
    """Map a normalized skew degree in [0, 1] onto a concrete partition spec.

    Degree 0 is the mildest setting of each kind (prob degenerates to a
    uniform assignment, qty to all classes per client, noise/qs to no skew);
    degree 1 is the most skewed. dir and qs move their concentration on a
    log scale 10 -> 1e-3.
    """
    if not 0.0 <= degree <= 1.0:
        raise ConfigError("non-iid degree must lie in [0, 1]")
    if kind in ("dir", "qs"):
        param = float(np.clip(10.0 ** (1.0 - 4.0 * degree), 1e-3, 10.0))
        return (
            PartitionSpec(kind="dir", dir_alpha=param)
            if kind == "dir"
            else PartitionSpec(kind="qs", qs_beta=param)
        )
    if kind == "prob":
        g = min(n_clients, class_count)
        return PartitionSpec(kind="prob", prob_q=1.0 / g + degree * (1.0 - 1.0 / g))
    if kind == "qty":
        k = int(round(class_count - degree * (class_count - 1)))
        return PartitionSpec(kind="qty", qty_k=max(1, k))
    if kind == "noise":
        return PartitionSpec(kind="noise", noise_sigma=2.0 * degree)
    raise ConfigError(f"non-iid degree is undefined for kind {kind!r}")
