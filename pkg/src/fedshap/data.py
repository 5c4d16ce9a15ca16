"""Datasets, non-IID partitioning and client heterogeneity."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError, InputError
from .nn import Dataset, ParamVector

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "FEDSHAP_DATA_DIR"

# file names as distributed for MNIST and Fashion-MNIST
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, path, what: str, magic: int, ndims: int):
    need = 4 + 4 * ndims
    if len(raw) < 4:
        raise IngestionError("truncated header", "magic", len(raw), path)
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IngestionError(
            f"bad magic 0x{found:08x} for {what} file (expected 0x{magic:08x})", "magic", 0, path
        )
    if len(raw) < need:
        raise IngestionError("truncated header", "dimensions", len(raw), path)
    return struct.unpack_from(">" + "I" * ndims, raw, 4), need


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Parse an IDX image/label pair; pixels are scaled by 1/255.

    Gzip-compressed files are recognised by their magic prefix.
    """
    images_raw = _read_bytes(images_path)
    labels_raw = _read_bytes(labels_path)

    (count, rows, cols), offset = _header(images_raw, images_path, "images", IMAGES_MAGIC, 3)
    payload = count * rows * cols
    if len(images_raw) - offset < payload:
        raise IngestionError(
            f"truncated pixel payload: {len(images_raw) - offset} of {payload} bytes",
            "pixels",
            len(images_raw),
            images_path,
        )
    pixels = np.frombuffer(images_raw, dtype=np.uint8, count=payload, offset=offset)

    (n_labels,), loff = _header(labels_raw, labels_path, "labels", LABELS_MAGIC, 1)
    if n_labels != count:
        raise IngestionError(
            f"label count {n_labels} does not match image count {count}", "count", 4, labels_path
        )
    if len(labels_raw) - loff < n_labels:
        raise IngestionError(
            f"truncated label payload: {len(labels_raw) - loff} of {n_labels} bytes",
            "labels",
            len(labels_raw),
            labels_path,
        )
    labels = np.frombuffer(labels_raw, dtype=np.uint8, count=n_labels, offset=loff)
    if n_labels and int(labels.max()) >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise IngestionError(
            f"label {int(labels[bad])} outside [0, {n_classes})", "labels", loff + bad, labels_path
        )

    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), n_classes)


def find_idx_pair(split: str, data_dir=None):
    """Locate the image/label files of ``split`` under ``data_dir``.

    Falls back to ``$FEDSHAP_DATA_DIR``; plain and ``.gz`` names are accepted.
    """
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise ConfigurationError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    found = []
    for name in IDX_FILES[split]:
        for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
            path = Path(data_dir) / candidate
            if path.exists():
                found.append(path)
                break
        else:
            raise ConfigurationError(f"missing IDX file {Path(data_dir) / name}")
    return tuple(found)


def power_law_inverse_cdf(u):
    """Inverse of the CDF ``x^3`` of the density ``3x^2`` on (0, 1)."""
    return np.cbrt(u)


def sample_power_law_x(size, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(size)
    # rng.random can return exactly 0.0
    u = np.where(u > 0.0, u, np.nextafter(0.0, 1.0))
    return power_law_inverse_cdf(u)


def sample_power_law_shares(n_clients: int, rng: np.random.Generator) -> np.ndarray:
    """Client shares ``q_k = x_k / sum(x)`` with ``x_k ~ 3x^2``."""
    x = sample_power_law_x(n_clients, rng)
    return x / x.sum()


def largest_remainder(q: np.ndarray, total: int, minimum: int = 1) -> np.ndarray:
    """Integer apportionment of ``total`` by shares ``q`` with a floor of ``minimum``."""
    raw = q * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    order = np.lexsort((np.arange(len(q)), -(raw - counts)))
    counts[order[:short]] += 1
    for k in np.flatnonzero(counts < minimum):
        deficit = minimum - counts[k]
        counts[k] = minimum
        while deficit:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            deficit -= 1
    return counts


def sample_power_law_sizes(n_clients: int, n_train: int, rng: np.random.Generator) -> List[int]:
    if n_clients < 1:
        raise InputError("need at least one client")
    if n_train < n_clients:
        raise InputError(f"n_train={n_train} is smaller than the number of clients {n_clients}")
    q = sample_power_law_shares(n_clients, rng)
    return [int(c) for c in largest_remainder(q, n_train)]


def sample_dirichlet(alpha: float, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet(alpha * 1) draw, stable for tiny ``alpha``.

    Gamma variates are generated in log space using
    ``Gamma(a) = Gamma(a + 1) * U^(1/a)`` so they never underflow to zero.
    """
    if not alpha > 0:
        raise ConfigurationError("dirichlet alpha must be positive")
    log_g = np.log(rng.gamma(alpha + 1.0, size=n_classes)) + np.log(rng.random(n_classes)) / alpha
    log_g -= log_g.max()
    p = np.exp(log_g)
    return p / p.sum()


@dataclass
class PartitionSpec:
    dirichlet_alpha: float = 1e-4
    num_clients: int = 30
    size_law: str = "power_law"
    label_draw: str = "multinomial"

    def __post_init__(self):
        if self.label_draw not in ("multinomial", "proportional"):
            raise ConfigurationError(f"unknown label_draw {self.label_draw!r}")
        if not self.dirichlet_alpha > 0:
            raise ConfigurationError("dirichlet_alpha must be positive")
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if self.size_law not in ("power_law", "uniform"):
            raise ConfigurationError(f"unknown size_law {self.size_law!r}")


@dataclass
class PerturbationSpec:
    straggler_fraction: float = 0.0
    noise_scale: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.straggler_fraction <= 1.0:
            raise ConfigurationError("straggler_fraction must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be nonnegative")


@dataclass
class ClientShard:
    client: int
    dataset: Dataset
    indices: np.ndarray
    is_straggler: bool = False
    sigma: float = 0.0

    @property
    def n(self) -> int:
        return self.dataset.n


def partition_sizes(spec: PartitionSpec, n_train: int, rng: np.random.Generator) -> List[int]:
    if spec.size_law == "power_law":
        return sample_power_law_sizes(spec.num_clients, n_train, rng)
    q = np.full(spec.num_clients, 1.0 / spec.num_clients)
    return [int(c) for c in largest_remainder(q, n_train)]


def dirichlet_partition(
    data: Dataset, spec: PartitionSpec, sizes: Sequence[int], rng: np.random.Generator
) -> List[ClientShard]:
    """Split ``data`` into disjoint label-skewed shards of the given sizes.

    Client ``k`` draws label proportions from Dirichlet(alpha), then a
    multinomial label count for its ``n_k`` samples (or, with
    ``label_draw="proportional"``, the largest-remainder rounding of
    ``n_k * p``), and takes samples without replacement from the per-label
    pools. Whatever a drained pool cannot supply comes uniformly from all
    samples still unassigned.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) != spec.num_clients:
        raise InputError(f"{len(sizes)} sizes for {spec.num_clients} clients")
    if any(s < 1 for s in sizes):
        raise InputError("every shard size must be positive")
    if sum(sizes) > data.n:
        raise InputError(f"shards need {sum(sizes)} samples, dataset has {data.n}")

    c = data.n_classes
    pools = [list(rng.permutation(np.flatnonzero(data.labels == label))) for label in range(c)]
    shards = []
    for k, n_k in enumerate(sizes):
        p = sample_dirichlet(spec.dirichlet_alpha, c, rng)
        if spec.label_draw == "multinomial":
            wanted = rng.multinomial(n_k, p)
        else:
            wanted = largest_remainder(p, n_k, minimum=0)
        taken = []
        for label in range(c):
            pool = pools[label]
            take = min(int(wanted[label]), len(pool))
            if take:
                taken.extend(pool[len(pool) - take :])
                del pool[len(pool) - take :]
        deficit = n_k - len(taken)
        if deficit:
            remaining = np.array(sorted(i for pool in pools for i in pool), dtype=np.int64)
            extra = rng.choice(remaining, size=deficit, replace=False)
            extra_set = set(int(i) for i in extra)
            for label in range(c):
                pools[label] = [i for i in pools[label] if i not in extra_set]
            taken.extend(int(i) for i in extra)
        idx = np.array(sorted(int(i) for i in taken), dtype=np.int64)
        shards.append(ClientShard(k, data.subset(idx), idx))
    return shards


def assign_perturbations(
    shards: List[ClientShard], spec: PerturbationSpec, rng: np.random.Generator
) -> List[ClientShard]:
    """Mark ``floor(x N)`` random stragglers and give client at rank ``r`` noise ``r * sigma / N``.

    Ranks come from a random permutation of the clients, starting at 0.
    """
    n = len(shards)
    n_strag = int(np.floor(spec.straggler_fraction * n + 1e-12))
    stragglers = set(int(k) for k in rng.choice(n, size=n_strag, replace=False))
    ranking = rng.permutation(n)
    sigma = np.empty(n)
    sigma[ranking] = np.arange(n) * spec.noise_scale / n
    return [
        replace(shard, is_straggler=i in stragglers, sigma=float(sigma[i]))
        for i, shard in enumerate(shards)
    ]


def apply_update_noise(params: ParamVector, sigma: float, rng: np.random.Generator) -> ParamVector:
    if sigma < 0:
        raise ConfigurationError("noise sigma must be nonnegative")
    if sigma == 0:
        return params
    return params.with_values(params.values + rng.normal(0.0, sigma, size=len(params)))


def make_synthetic(
    n_classes: int,
    dim: int,
    n: int,
    rng: np.random.Generator,
    separation: float = 1.0,
) -> Dataset:
    """Balanced Gaussian blobs with unit covariance.

    Class means sit at ``separation`` times the standard basis vectors
    (a scaled simplex) when ``dim >= n_classes``; otherwise they are random
    directions of length ``separation``.
    """
    if n < n_classes:
        raise InputError(f"need at least one sample per class, got n={n} < {n_classes}")
    if n_classes < 1 or dim < 1:
        raise InputError("n_classes and dim must be positive")
    if dim >= n_classes:
        means = np.zeros((n_classes, dim))
        means[np.arange(n_classes), np.arange(n_classes)] = separation
    else:
        dirs = rng.normal(size=(n_classes, dim))
        means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.arange(n) % n_classes
    labels = labels[rng.permutation(n)]
    features = means[labels] + rng.normal(size=(n, dim))
    return Dataset(features, labels, n_classes)


def split_half(data: Dataset, rng: np.random.Generator):
    """Disjoint random halves (validation, test) of a held-out pool."""
    order = rng.permutation(data.n)
    half = data.n // 2
    return data.subset(np.sort(order[:half])), data.subset(np.sort(order[half:]))
