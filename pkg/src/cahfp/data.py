"""Datasets, IDX ingestion and Dirichlet non-IID client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError, PartitionError


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("inputs and labels differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.provenance)


@dataclass(frozen=True)
class Partition:
    shards: tuple
    alpha: float
    seed: object

    @property
    def sizes(self):
        return np.array([len(s) for s in self.shards])


def synth_dataset(num_classes, dim, per_class, class_sep, seed):
    """Isotropic unit-variance Gaussian blobs.

    When ``dim >= num_classes`` the class means are scaled vertices of a
    randomly rotated simplex, so every pair is exactly ``class_sep`` apart.
    Otherwise means are random and rescaled so the closest pair is
    ``class_sep`` apart.
    """
    if num_classes < 2 or dim < 2 or per_class < 1:
        raise ValueError("need num_classes >= 2, dim >= 2, per_class >= 1")
    rng = np.random.default_rng(seed)
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        means = class_sep / np.sqrt(2.0) * q[:, :num_classes].T
    else:
        means = rng.normal(size=(num_classes, dim))
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        means *= class_sep / dist[np.triu_indices(num_classes, 1)].min()
    y = np.repeat(np.arange(num_classes), per_class)
    x = means[y] + rng.normal(size=(len(y), dim))
    return Dataset(x, y, num_classes, "synthetic")


def train_test_split(ds, holdout, seed):
    if not 0 <= holdout < 1:
        raise ValueError("holdout fraction must lie in [0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(holdout * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


_IDX_UBYTE = 0x08


def read_idx(path):
    """Read an unsigned-byte IDX array (big-endian header)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise IngestionError(f"{path}: file too short for a magic number", "magic")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != _IDX_UBYTE or ndim not in (1, 3):
        raise IngestionError(f"{path}: bad magic 0x{raw[:4].hex()}", "magic")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated dimension header", "dims")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != count:
        raise IngestionError(f"{path}: payload has {len(payload)} bytes, dims {dims} need {count}", "payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None):
    """Load an FMNIST-style image/label pair as a (n, 1, h, w) dataset in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IngestionError(f"{images_path}: expected a 3-d image file", "magic")
    if labels.ndim != 1:
        raise IngestionError(f"{labels_path}: expected a 1-d label file", "magic")
    if len(images) != len(labels):
        raise IngestionError(f"{len(images)} images but {len(labels)} labels", "count")
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 0
    elif len(y) and y.max() >= num_classes:
        raise IngestionError(f"label {y.max()} >= num_classes={num_classes}", "labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, y, num_classes, f"idx:{Path(images_path).name}")


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, _IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def dirichlet_partition(labels, num_clients, alpha, min_shard=1, seed=0, max_retries=100):
    """Split sample indices class by class with Dir(alpha) client proportions.

    Every sample is assigned. The whole draw is repeated until each shard holds
    at least ``min_shard`` samples.
    """
    if num_clients < 1 or alpha <= 0 or min_shard < 1:
        raise ValueError("need num_clients >= 1, alpha > 0, min_shard >= 1")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    for _ in range(max_retries):
        buckets = [[] for _ in range(num_clients)]
        for idx in by_class:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, float(alpha)))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        shards = tuple(np.sort(np.concatenate(b)) for b in buckets)
        if min(len(s) for s in shards) >= min_shard:
            return Partition(shards, float(alpha), seed)
    raise PartitionError(
        f"no Dir({alpha}) partition over {num_clients} clients gave every shard >= {min_shard} samples "
        f"after {max_retries} draws; use a larger dataset, a larger alpha or a smaller min_shard"
    )


def client_weights(partition):
    sizes = partition.sizes.astype(np.float64)
    return sizes / sizes.sum()


def class_entropy(labels, shards, num_classes):
    """Mean Shannon entropy (nats) of the per-client label distributions."""
    out = []
    for s in shards:
        counts = np.bincount(labels[s], minlength=num_classes).astype(float)
        p = counts[counts > 0] / counts.sum()
        out.append(-(p * np.log(p)).sum())
    return float(np.mean(out))
