"""Server-side similarity assessment and client partitioning.

The server inverts every client's conditional flow on one shared pair of
standard-normal batches, compares the per-label mean reconstructions by
cosine, damps entries whose own reconstructions are inconsistent, reduces
the per-label tensor to a client-by-client matrix, and runs K-Means on its
symmetrized rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .cinn import CinnParams, cinn_inverse, one_hot, unknown_label
from .nn import Array

log = logging.getLogger(__name__)


@dataclass
class SimilarityTensors:
    """Per-label similarity pipeline outputs.

    basic[l, i, j] is the cosine between client i's first-noise and client
    j's second-noise mean reconstructions for slice label labels[l];
    confidence damps pairs whose self-consistency is low; fused is their
    elementwise product; reduced is the label-mean client-by-client matrix.
    """

    basic: Array
    confidence: Array
    fused: Array
    reduced: Array
    labels: list[int]


@dataclass
class ClusterSolution:
    """Client-to-cluster assignment with the centroids that produced it."""

    assignment: Array
    centroids: Array
    inertia: float

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    @property
    def cluster_count(self) -> int:
        return self.centroids.shape[0]

    def members(self, cluster: int) -> Array:
        return np.flatnonzero(self.assignment == cluster)


@dataclass
class ComplexityCounters:
    """Instrumented operation counts for the cost-accounting checks."""

    inversion_batches: int = 0
    similarity_entries: int = 0
    cinn_steps: int = 0
    classifier_steps: int = 0
    clustering_calls: list[dict] = field(default_factory=list)
    round_cinn_steps: list[int] = field(default_factory=list)


def reconstruct_pair(cinn: CinnParams, label: int, eps1: Array, eps2: Array):
    """Mean latent reconstruction of each shared noise batch under one label."""
    z1, z2 = reconstruct_label_means(cinn, [label], eps1, eps2)
    return z1[0], z2[0]


def reconstruct_label_means(cinn: CinnParams, labels, eps1: Array, eps2: Array,
                            counters: ComplexityCounters | None = None):
    """Batched per-label mean reconstructions, one inversion per noise half.

    Every label's conditions are stacked into a single batch, so the whole
    table costs exactly two inversion batches per client regardless of the
    label count. Returns two (len(labels), latent_dim) arrays.
    """
    labels = list(labels)
    batch = eps1.shape[0]
    conds = np.repeat(one_hot(labels, cinn.condition_dim), batch, axis=0)
    means = []
    for eps in (eps1, eps2):
        stacked = np.tile(eps, (len(labels), 1))
        recon = cinn_inverse(cinn, stacked, conds)
        means.append(recon.reshape(len(labels), batch, -1).mean(axis=1))
        if counters is not None:
            counters.inversion_batches += 1
    return means[0], means[1]


def basic_similarity(zeta1: Array, zeta2: Array,
                     counters: ComplexityCounters | None = None) -> Array:
    """Cosine table over (label, client i, client j) reconstruction pairs.

    zeta1/zeta2 are (labels, clients, latent) mean-reconstruction tables.
    A zero vector gets cosine 0 against everything (minimum confidence).
    """
    if zeta1.shape != zeta2.shape:
        raise ValueError(f"shape mismatch: {zeta1.shape} vs {zeta2.shape}")
    n1 = np.linalg.norm(zeta1, axis=2)
    n2 = np.linalg.norm(zeta2, axis=2)
    if np.any(n1 == 0) or np.any(n2 == 0):
        log.warning("zero-length reconstruction vector; its cosines are set to 0")
    unit = lambda z, n: np.divide(z, n[:, :, None], out=np.zeros_like(z),
                                  where=n[:, :, None] > 0)
    basic = np.einsum("lid,ljd->lij", unit(zeta1, n1), unit(zeta2, n2))
    if counters is not None:
        counters.similarity_entries += basic.size
    return np.clip(basic, -1.0, 1.0)


def confidence_matrix(basic: Array) -> Array:
    """Pairwise confidence: the larger of the two self-consistency magnitudes."""
    diag = np.abs(np.einsum("lii->li", basic))
    return np.maximum(diag[:, :, None], diag[:, None, :])


def fuse_and_reduce(basic: Array, confidence: Array) -> tuple[Array, Array]:
    """Elementwise fusion and label-mean reduction to a client matrix."""
    if basic.shape != confidence.shape:
        raise ValueError(f"shape mismatch: {basic.shape} vs {confidence.shape}")
    fused = basic * confidence
    return fused, fused.mean(axis=0)


def kmeans(points: Array, clusters: int, iters: int = 100, restarts: int = 10,
           tol: float = 1e-8, rng: np.random.Generator | None = None) -> ClusterSolution:
    """Lloyd iterations from distance-weighted (k-means++) seeding.

    Keeps the best inertia over `restarts` runs; an empty cluster is repaired
    by reseeding its centroid to the point farthest from its current centroid.
    Every cluster holds at least one point in the returned solution.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if clusters <= 0:
        raise ValueError(f"cluster count must be positive, got {clusters}")
    if clusters > n:
        raise ValueError(f"cannot split {n} points into {clusters} clusters")
    rng = rng if rng is not None else np.random.default_rng(0)

    best: ClusterSolution | None = None
    for _ in range(restarts):
        centroids = _kmeans_pp_seed(points, clusters, rng)
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(iters):
            dist2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            assign = dist2.argmin(axis=1)
            assign = _repair_empty(points, centroids, assign, clusters)
            new_centroids = np.array([points[assign == c].mean(axis=0)
                                      for c in range(clusters)])
            shift = np.linalg.norm(new_centroids - centroids)
            centroids = new_centroids
            if shift < tol:
                break
        inertia = float(((points - centroids[assign]) ** 2).sum())
        if best is None or inertia < best.inertia - 1e-15:
            best = ClusterSolution(assign.copy(), centroids.copy(), inertia)
    assert best is not None
    return best


def _kmeans_pp_seed(points: Array, clusters: int, rng: np.random.Generator) -> Array:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(1, clusters):
        d2 = np.min(((points[:, None, :] - points[chosen][None, :, :]) ** 2).sum(axis=2),
                    axis=1)
        total = d2.sum()
        if total == 0:
            # all remaining distances zero (duplicate points): pick uniformly
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
    return points[chosen].astype(np.float64).copy()


def _repair_empty(points: Array, centroids: Array, assign: Array,
                  clusters: int) -> Array:
    """Give every empty cluster the point farthest from its own centroid,
    stealing only from clusters that keep at least one point."""
    assign = assign.copy()
    for c in range(clusters):
        if np.any(assign == c):
            continue
        dist = np.linalg.norm(points - centroids[assign], axis=1)
        counts = np.bincount(assign, minlength=clusters)
        movable = counts[assign] > 1
        if not np.any(movable):
            continue
        dist = np.where(movable, dist, -np.inf)
        assign[int(np.argmax(dist))] = c
    return assign


def cluster_clients(cinns: list[CinnParams], label_space_size: int, clusters: int,
                    recon_batch: int, rng: np.random.Generator,
                    include_unknown: bool = False,
                    counters: ComplexityCounters | None = None,
                    kmeans_restarts: int = 10, kmeans_iters: int = 100,
                    kmeans_tol: float = 1e-8):
    """Full similarity-and-partition pass over all clients' flows.

    Generates one shared noise pair, reconstructs per-label means with two
    inversion batches per client, builds the similarity tensors, and feeds
    the rows of the symmetrized reduced matrix to K-Means.

    Returns (ClusterSolution, SimilarityTensors).
    """
    n_clients = len(cinns)
    latent_dim = cinns[0].latent_dim
    labels = list(range(label_space_size))
    if include_unknown:
        labels.append(unknown_label(label_space_size))

    noise = rng.standard_normal((2 * recon_batch, latent_dim))
    eps1, eps2 = noise[:recon_batch], noise[recon_batch:]

    before = (counters.inversion_batches, counters.similarity_entries) \
        if counters is not None else (0, 0)
    zeta1 = np.empty((len(labels), n_clients, latent_dim))
    zeta2 = np.empty((len(labels), n_clients, latent_dim))
    for k, cinn in enumerate(cinns):
        z1, z2 = reconstruct_label_means(cinn, labels, eps1, eps2, counters)
        zeta1[:, k, :] = z1
        zeta2[:, k, :] = z2

    basic = basic_similarity(zeta1, zeta2, counters)
    confidence = confidence_matrix(basic)
    fused, reduced = fuse_and_reduce(basic, confidence)
    tensors = SimilarityTensors(basic, confidence, fused, reduced, labels)

    symmetric = 0.5 * (reduced + reduced.T)
    solution = kmeans(symmetric, clusters, iters=kmeans_iters,
                      restarts=kmeans_restarts, tol=kmeans_tol, rng=rng)
    if counters is not None:
        counters.clustering_calls.append({
            "inversion_batches": counters.inversion_batches - before[0],
            "similarity_entries": counters.similarity_entries - before[1],
        })
    return solution, tensors


def adjusted_rand_index(assignment, ground_truth) -> float:
    """Chance-corrected agreement between two labelings; 1.0 is identical."""
    return float(adjusted_rand_score(np.asarray(ground_truth), np.asarray(assignment)))


def cluster_margin(tensors: SimilarityTensors, ground_truth: Array,
                   label_space_size: int | None = None) -> float:
    """Mean intra-cluster minus mean inter-cluster fused similarity.

    Averages over off-diagonal client pairs and over the real-label slices
    (the synthetic slot, if present, is excluded).
    """
    truth = np.asarray(ground_truth)
    keep = [i for i, lab in enumerate(tensors.labels)
            if label_space_size is None or lab < label_space_size]
    fused = tensors.fused[keep]
    same = truth[:, None] == truth[None, :]
    off_diag = ~np.eye(len(truth), dtype=bool)
    intra = fused[:, same & off_diag].mean()
    inter = fused[:, ~same].mean()
    return float(intra - inter)
