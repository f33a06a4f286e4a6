"""Synthetic datasets, Dirichlet non-i.i.d. partitioning, and label swaps.

The label swaps are what create the ground-truth client clusters: every
client in a cluster relabels its samples through the same permutation, so
clients in different clusters hold genuinely conflicting objectives while
their feature distributions stay identical.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Array

log = logging.getLogger(__name__)

EMPTY_CLIENT_RETRIES = 20


@dataclass
class LabeledDataset:
    """Feature rows with integer class labels in [0, label_space_size)."""

    features: Array
    labels: Array
    label_space_size: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows for "
                f"{self.labels.shape[0]} labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.label_space_size):
            raise ValueError(
                f"labels outside [0, {self.label_space_size}): {self.labels}")

    def __len__(self) -> int:
        return self.features.shape[0]

    def present_labels(self) -> set[int]:
        return set(int(v) for v in np.unique(self.labels))


@dataclass
class PartitionSpec:
    """How a dataset is split into client shards."""

    client_count: int
    dirichlet_beta: float
    cluster_count: int
    cluster_assignment: Array
    seed: int

    def __post_init__(self):
        self.cluster_assignment = np.asarray(self.cluster_assignment, dtype=np.int64)
        if self.cluster_assignment.shape != (self.client_count,):
            raise ValueError("cluster_assignment must map every client")
        if set(self.cluster_assignment) != set(range(self.cluster_count)):
            raise ValueError(
                f"cluster_assignment must be surjective onto 0..{self.cluster_count - 1}")
        if self.dirichlet_beta <= 0:
            raise ValueError(f"dirichlet_beta must be positive, got {self.dirichlet_beta}")


def block_assignment(client_count: int, cluster_count: int) -> Array:
    """Contiguous ground-truth clusters: clients 0..N/M-1 -> cluster 0, etc."""
    return np.array([k * cluster_count // client_count for k in range(client_count)],
                    dtype=np.int64)


def make_blobs(classes: int, per_class: int, input_dim: int, separation: float,
               rng: np.random.Generator, sigma: float = 1.0) -> LabeledDataset:
    """Gaussian class blobs with pairwise mean distance >= separation.

    Means are drawn standard normal and rescaled so the minimum pairwise
    distance equals `separation` exactly; separation 0 collapses all means
    to the origin.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    means = rng.standard_normal((classes, input_dim))
    diffs = means[:, None, :] - means[None, :, :]
    dists = np.sqrt((diffs ** 2).sum(axis=2))
    min_dist = dists[~np.eye(classes, dtype=bool)].min()
    means = means * (separation / min_dist) if min_dist > 0 else np.zeros_like(means)

    features = np.concatenate(
        [means[c] + sigma * rng.standard_normal((per_class, input_dim))
         for c in range(classes)])
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(len(labels))
    return LabeledDataset(features[order], labels[order], classes)


def dirichlet_partition(dataset: LabeledDataset,
                        spec: PartitionSpec) -> list[LabeledDataset]:
    """Split a dataset into N disjoint shards with Dirichlet class proportions.

    Per class, client proportions are drawn Dirichlet(beta * 1_N); smaller
    beta means more heterogeneity, and clients may receive zero samples of
    some classes. A completely empty client triggers a bounded re-draw.
    """
    if spec.client_count < 1:
        raise ValueError("client_count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x0D]))
    n = spec.client_count
    for attempt in range(EMPTY_CLIENT_RETRIES):
        shard_idx: list[list[int]] = [[] for _ in range(n)]
        for c in range(dataset.label_space_size):
            idx = np.flatnonzero(dataset.labels == c)
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n, spec.dirichlet_beta))
            counts = _largest_remainder(props, len(idx))
            start = 0
            for k in range(n):
                shard_idx[k].extend(idx[start:start + counts[k]].tolist())
                start += counts[k]
        if all(shard_idx):
            break
        log.warning("dirichlet partition attempt %d left a client empty; re-drawing",
                    attempt + 1)
    else:
        log.warning("empty client persists after %d re-draws", EMPTY_CLIENT_RETRIES)
    return [LabeledDataset(dataset.features[np.array(ix, dtype=np.int64)],
                           dataset.labels[np.array(ix, dtype=np.int64)],
                           dataset.label_space_size)
            for ix in shard_idx]


def _largest_remainder(proportions: Array, total: int) -> Array:
    """Round proportions * total to integers that sum exactly to total."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def make_swap_tables(classes: int, clusters: int,
                     rng: np.random.Generator) -> list[Array]:
    """Per-cluster label permutations: identity for cluster 0, seeded
    fixed-point-free permutations for the rest, pairwise distinct."""
    tables = [np.arange(classes, dtype=np.int64)]
    seen = {tuple(tables[0])}
    for _ in range(1, clusters):
        while True:
            perm = rng.permutation(classes)
            if not np.any(perm == np.arange(classes)) and tuple(perm) not in seen:
                break
        tables.append(perm.astype(np.int64))
        seen.add(tuple(perm))
    return tables


def apply_label_swap(shard: LabeledDataset, cluster_id: int,
                     swap_tables: list[Array]) -> LabeledDataset:
    """Relabel a shard through its cluster's permutation; features untouched."""
    table = np.asarray(swap_tables[cluster_id], dtype=np.int64)
    if sorted(table.tolist()) != list(range(shard.label_space_size)):
        raise ValueError(f"swap table is not a permutation of the label space: {table}")
    return LabeledDataset(shard.features, table[shard.labels], shard.label_space_size)


def train_test_split(shard: LabeledDataset, fraction: float,
                     seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint seeded split, stratified by label where counts permit."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B]))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for c in range(shard.label_space_size):
        idx = rng.permutation(np.flatnonzero(shard.labels == c))
        n_train = int(round(fraction * len(idx)))
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    if not test_idx:
        log.warning("split produced an empty test set (%d samples)", len(shard))
    take = lambda ix: LabeledDataset(shard.features[np.array(ix, dtype=np.int64)],
                                     shard.labels[np.array(ix, dtype=np.int64)],
                                     shard.label_space_size)
    return take(sorted(train_idx)), take(sorted(test_idx))


def save_dataset_csv(dataset: LabeledDataset, path: str | Path) -> None:
    """Dump as CSV with feature columns followed by a `label` column."""
    dim = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([format(v, ".17g") for v in row] + [int(label)])


def load_dataset_csv(path: str | Path,
                     label_space_size: int | None = None) -> LabeledDataset:
    """Inverse of save_dataset_csv; infers the label space if not given."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: last column must be `label`")
        rows = list(reader)
    features = np.array([[float(v) for v in row[:-1]] for row in rows])
    labels = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    if label_space_size is None:
        label_space_size = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(features, labels, label_space_size)
