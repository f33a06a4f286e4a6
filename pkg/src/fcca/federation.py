"""Federated training loop: local client updates, server aggregation,
per-round reclustering, and the FedAvg baseline.

Each round every client re-initializes its encoder and classifier from the
server (the classifier from its assigned cluster's head), trains both on
local cross-entropy, then freezes the encoder and trains its conditional
flow on the encoded features. The server clusters clients from the flows,
averages the encoder across everyone, and averages classifiers within each
cluster. Flows persist locally and are never aggregated.

All randomness is derived from the config seed through named substreams, so
a run is reproducible from its config alone and client updates can execute
in any order without changing the result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import cinn as flows
from .cinn import CinnParams, cinn_sgd_step, cml_loss_and_grads, init_cinn
from .clustering import (ClusterSolution, ComplexityCounters, SimilarityTensors,
                         adjusted_rand_index, cluster_clients)
from .data import (LabeledDataset, PartitionSpec, apply_label_swap,
                   block_assignment, dirichlet_partition, make_blobs,
                   make_swap_tables, train_test_split)
from .nn import (Array, MlpParams, flatten_mlp, init_mlp, mlp_backward,
                 mlp_forward, mlp_forward_cached, rng_from, sgd_step,
                 softmax_cross_entropy_grad, unflatten_mlp)

log = logging.getLogger(__name__)

# substream tags for named seeding
TAG_DATA = 0xDA
TAG_SWAP = 0x51
TAG_INIT = 0x11
TAG_CINN_INIT = 0xC1
TAG_CLASSIFIER_PHASE = 0xF1
TAG_CINN_PHASE = 0xF2
TAG_SERVER = 0x5E


@dataclass
class FederationConfig:
    """All run hyperparameters; defaults are the desk-scale reference task."""

    clients: int = 10
    clusters: int = 2
    true_clusters: int = 2
    epochs: int = 20
    local_steps: int = 20
    lr: float = 0.01
    alpha: float = 1.0
    batch_size: int = 64

    classes: int = 4
    input_dim: int = 8
    samples_per_client: int = 200
    separation: float = 6.0
    blob_sigma: float = 1.0
    dirichlet_beta: float = 0.5
    train_fraction: float = 0.8

    latent_dim: int = 16
    blocks: int = 4
    subnet_hidden: int = 32
    encoder_hidden: tuple = (32, 32)
    classifier_hidden: tuple = (32,)
    clamp: float = 2.0

    recon_batch: int = 64
    recluster_every: int = 1
    kmeans_restarts: int = 10
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-8

    grad_clip: float = 5.0
    cinn_enabled: bool = True
    unknown_augmentation: bool = True
    similarity_include_unknown: bool = False
    seed: int = 0

    def validate(self) -> None:
        problems = []
        positive = ["clients", "clusters", "true_clusters", "batch_size",
                    "samples_per_client", "input_dim", "latent_dim", "blocks",
                    "subnet_hidden", "recon_batch", "recluster_every",
                    "kmeans_restarts", "kmeans_iters"]
        for name in positive:
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ["epochs", "local_steps"]:
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ["lr", "alpha", "blob_sigma", "separation", "kmeans_tol",
                     "grad_clip"]:
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.classes < 2:
            problems.append(f"classes must be >= 2, got {self.classes}")
        if self.clusters > self.clients:
            problems.append(f"clusters ({self.clusters}) must be <= clients ({self.clients})")
        if self.true_clusters > self.clients:
            problems.append(f"true_clusters ({self.true_clusters}) must be <= clients")
        if self.latent_dim % 2 != 0:
            problems.append(f"latent_dim must be even, got {self.latent_dim}")
        if not 0.0 < self.train_fraction < 1.0:
            problems.append(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.dirichlet_beta <= 0:
            problems.append(f"dirichlet_beta must be positive, got {self.dirichlet_beta}")
        if self.clamp <= 0:
            problems.append(f"clamp must be positive, got {self.clamp}")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    @property
    def condition_dim(self) -> int:
        return self.classes + 1


@dataclass
class ClientModel:
    """One client's parameter triple plus its local data."""

    client_id: int
    encoder: MlpParams
    classifier: MlpParams
    cinn: CinnParams
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class GlobalState:
    """Server-side state between rounds."""

    global_encoder: MlpParams
    cluster_classifiers: list[MlpParams]
    solution: ClusterSolution
    round: int = 0


@dataclass
class AggregationWeights:
    """Per-client weights: encoder weights sum to 1 overall, classifier
    weights sum to 1 within each cluster."""

    encoder: Array
    classifier: Array


@dataclass
class RoundMetrics:
    round: int
    global_acc: float
    global_std: float
    personalized_acc: float
    personalized_std: float
    ari: float
    ce_loss: float
    cml_loss: float


@dataclass
class RunReport:
    """Everything a run produced: metrics history, final state, counters."""

    config: FederationConfig
    history: list[RoundMetrics]
    final_state: GlobalState
    final_clients: list[ClientModel]
    final_tensors: SimilarityTensors | None
    ground_truth: Array
    trajectory: list[Array]
    counters: ComplexityCounters

    @property
    def final(self) -> RoundMetrics:
        return self.history[-1]


def shard_weights(sizes, assignment: Array, clusters: int) -> AggregationWeights:
    """Weights proportional to shard sizes, normalized globally for the
    encoder and per cluster for the classifiers."""
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise ValueError("no samples across any client")
    p_enc = sizes / total
    p_cls = np.zeros_like(sizes)
    for c in range(clusters):
        members = np.asarray(assignment) == c
        mass = sizes[members].sum()
        if mass > 0:
            p_cls[members] = sizes[members] / mass
    return AggregationWeights(p_enc, p_cls)


def aggregate_encoder(encoders: list[MlpParams], weights: Array) -> MlpParams:
    """Elementwise weighted average of structurally congruent nets."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(encoders) != len(weights):
        raise ValueError(f"{len(encoders)} encoders for {len(weights)} weights")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {weights.sum()!r}, not 1")
    template = encoders[0]
    flat = np.zeros(flatten_mlp(template).size)
    for enc, w in zip(encoders, weights):
        vec = flatten_mlp(enc)
        if vec.size != flat.size:
            raise ValueError("encoders are not structurally congruent")
        flat += w * vec
    return unflatten_mlp(flat, template)


def aggregate_cluster_classifiers(classifiers: list[MlpParams],
                                  solution: ClusterSolution,
                                  weights: AggregationWeights,
                                  previous: list[MlpParams]) -> list[MlpParams]:
    """One weighted average per cluster; an empty cluster keeps its
    previous classifier."""
    merged = []
    for c in range(len(previous)):
        members = solution.members(c)
        if len(members) == 0 or weights.classifier[members].sum() <= 0:
            log.info("cluster %d is empty this round; keeping its classifier", c)
            merged.append(previous[c].copy())
            continue
        w = weights.classifier[members]
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"cluster {c} weights sum to {w.sum()!r}, not 1")
        merged.append(aggregate_encoder([classifiers[k] for k in members], w))
    return merged


def _batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> Array:
    return rng.choice(n, size=min(batch_size, n), replace=False)


def client_update(client: ClientModel, global_encoder: MlpParams,
                  cluster_classifier: MlpParams, config: FederationConfig,
                  round_idx: int,
                  counters: ComplexityCounters | None = None):
    """One client's local work for a round.

    Phase 1: local_steps of minibatch SGD on cross-entropy through the
    classifier-on-encoder composition, starting from the server's current
    parameters. Phase 2: the encoder frozen, local_steps of SGD on the
    conditional maximum-likelihood loss of the flow over encoded features,
    each real batch paired with an equal-sized synthetic batch (skipped
    when augmentation is disabled).

    Returns (updated ClientModel, stats dict with mean phase losses).
    """
    encoder = global_encoder.copy()
    classifier = cluster_classifier.copy()
    cinn_params = client.cinn
    train = client.train
    n = len(train)

    ce_losses = []
    rng = rng_from(config.seed, TAG_CLASSIFIER_PHASE, round_idx, client.client_id)
    for _ in range(config.local_steps):
        idx = _batch_indices(rng, n, config.batch_size)
        latent, enc_cache = mlp_forward_cached(encoder, train.features[idx])
        logits, cls_cache = mlp_forward_cached(classifier, latent)
        loss, grad_logits = softmax_cross_entropy_grad(logits, train.labels[idx])
        cls_grads, grad_latent = mlp_backward(classifier, cls_cache, grad_logits)
        enc_grads, _ = mlp_backward(encoder, enc_cache, grad_latent)
        encoder = sgd_step(encoder, enc_grads, config.lr)
        classifier = sgd_step(classifier, cls_grads, config.lr)
        ce_losses.append(loss)
        if counters is not None:
            counters.classifier_steps += 1

    cml_losses = []
    if config.cinn_enabled:
        rng = rng_from(config.seed, TAG_CINN_PHASE, round_idx, client.client_id)
        absent = sorted(set(range(config.classes)) - train.present_labels())
        for _ in range(config.local_steps):
            idx = _batch_indices(rng, n, config.batch_size)
            z = mlp_forward(encoder, train.features[idx])
            y = train.labels[idx]
            if config.unknown_augmentation:
                z_syn, y_syn = flows.sample_synthetic(
                    config.latent_dim, config.classes, absent, len(idx), rng)
            else:
                z_syn, y_syn = None, None
            loss, grads = cml_loss_and_grads(cinn_params, z, y, z_syn, y_syn,
                                             config.alpha)
            if config.grad_clip > 0:
                grads = flows.clip_cinn_grads(grads, config.grad_clip)
            cinn_params = cinn_sgd_step(cinn_params, grads, config.lr)
            cml_losses.append(loss)
            if counters is not None:
                counters.cinn_steps += 1

    stats = {"ce_loss": float(np.mean(ce_losses)) if ce_losses else float("nan"),
             "cml_loss": float(np.mean(cml_losses)) if cml_losses else float("nan")}
    updated = ClientModel(client.client_id, encoder, classifier, cinn_params,
                          client.train, client.test)
    return updated, stats


def run_round(state: GlobalState, clients: list[ClientModel],
              config: FederationConfig,
              counters: ComplexityCounters | None = None,
              oracle_assignment: Array | None = None):
    """One global round: parallel-equivalent client updates, optional
    reclustering, then aggregation.

    Returns (new state, updated clients, tensors or None, round stats).
    """
    round_idx = state.round
    steps_before = counters.cinn_steps if counters is not None else 0
    updated: list[ClientModel] = []
    stats: list[dict | None] = []
    for client in clients:
        if len(client.train) == 0:
            log.warning("client %d has no training data; skipped this round",
                        client.client_id)
            updated.append(client)
            stats.append(None)
            continue
        head = state.cluster_classifiers[int(state.solution.assignment[client.client_id])]
        new_client, st = client_update(client, state.global_encoder, head,
                                       config, round_idx, counters)
        updated.append(new_client)
        stats.append(st)

    solution = state.solution
    tensors = None
    if oracle_assignment is not None:
        solution = ClusterSolution(np.asarray(oracle_assignment, dtype=np.int64),
                                   np.zeros((config.clusters, config.clients)), 0.0)
    elif config.cinn_enabled and round_idx % config.recluster_every == 0:
        rng = rng_from(config.seed, TAG_SERVER, round_idx)
        solution, tensors = cluster_clients(
            [c.cinn for c in updated], config.classes, config.clusters,
            config.recon_batch, rng,
            include_unknown=config.similarity_include_unknown,
            counters=counters, kmeans_restarts=config.kmeans_restarts,
            kmeans_iters=config.kmeans_iters, kmeans_tol=config.kmeans_tol)

    sizes = [len(c.train) if st is not None else 0
             for c, st in zip(updated, stats)]
    weights = shard_weights(sizes, solution.assignment, config.clusters)
    encoder = aggregate_encoder([c.encoder for c in updated], weights.encoder)
    classifiers = aggregate_cluster_classifiers(
        [c.classifier for c in updated], solution, weights,
        previous=state.cluster_classifiers)

    if counters is not None:
        counters.round_cinn_steps.append(counters.cinn_steps - steps_before)
    done = [st for st in stats if st is not None]
    round_stats = {
        "ce_loss": float(np.mean([st["ce_loss"] for st in done])) if done else float("nan"),
        "cml_loss": float(np.mean([st["cml_loss"] for st in done])) if done else float("nan"),
    }
    new_state = GlobalState(encoder, classifiers, solution, round_idx + 1)
    return new_state, updated, tensors, round_stats


def evaluate(state: GlobalState, clients: list[ClientModel]):
    """Accuracy of each client's test set under its assigned cluster model.

    Returns (global_acc, global_std, personalized_acc, personalized_std):
    global pools all test samples (sample-weighted), personalized is the
    plain mean of per-client accuracies; both stds are across clients.
    """
    per_client = []
    counts = []
    for client in clients:
        if len(client.test) == 0:
            log.warning("client %d has an empty test set; excluded", client.client_id)
            continue
        head = state.cluster_classifiers[int(state.solution.assignment[client.client_id])]
        logits = mlp_forward(head, mlp_forward(state.global_encoder,
                                               client.test.features))
        correct = (logits.argmax(axis=1) == client.test.labels).sum()
        per_client.append(correct / len(client.test))
        counts.append(len(client.test))
    if not per_client:
        return float("nan"), float("nan"), float("nan"), float("nan")
    accs = np.array(per_client)
    counts = np.array(counts, dtype=np.float64)
    global_acc = float((accs * counts).sum() / counts.sum())
    return (global_acc, float(accs.std()), float(accs.mean()), float(accs.std()))


def build_clients(config: FederationConfig):
    """Generate the federation's data and freshly initialized models.

    Returns (clients, ground_truth assignment).
    """
    data_rng = rng_from(config.seed, TAG_DATA)
    total = config.clients * config.samples_per_client
    per_class = max(1, total // config.classes)
    dataset = make_blobs(config.classes, per_class, config.input_dim,
                         config.separation, data_rng, sigma=config.blob_sigma)
    ground_truth = block_assignment(config.clients, config.true_clusters)
    spec = PartitionSpec(config.clients, config.dirichlet_beta,
                         config.true_clusters, ground_truth, seed=config.seed)
    shards = dirichlet_partition(dataset, spec)
    tables = make_swap_tables(config.classes, config.true_clusters,
                              rng_from(config.seed, TAG_SWAP))

    init_rng = rng_from(config.seed, TAG_INIT)
    encoder = init_mlp([config.input_dim, *config.encoder_hidden,
                        config.latent_dim], init_rng)
    classifier = init_mlp([config.latent_dim, *config.classifier_hidden,
                           config.classes], init_rng)

    clients = []
    for k, shard in enumerate(shards):
        swapped = apply_label_swap(shard, int(ground_truth[k]), tables)
        train, test = train_test_split(swapped, config.train_fraction,
                                       seed=config.seed * 1_000_003 + k)
        cinn_params = init_cinn(config.latent_dim, config.condition_dim,
                                config.blocks, config.subnet_hidden, config.clamp,
                                rng_from(config.seed, TAG_CINN_INIT, k))
        clients.append(ClientModel(k, encoder.copy(), classifier.copy(),
                                   cinn_params, train, test))
    return clients, ground_truth


def initial_state(config: FederationConfig, clients: list[ClientModel]) -> GlobalState:
    """Server state before the first round: every cluster starts from the
    same classifier and every client sits in cluster 0."""
    solution = ClusterSolution(np.zeros(config.clients, dtype=np.int64),
                               np.zeros((config.clusters, config.clients)),
                               float("nan"))
    encoder = clients[0].encoder.copy()
    classifiers = [clients[0].classifier.copy() for _ in range(config.clusters)]
    return GlobalState(encoder, classifiers, solution, round=0)


def flatten_state(state: GlobalState) -> Array:
    """Server parameters as one vector (encoder, then each cluster head)."""
    return np.concatenate([flatten_mlp(state.global_encoder)]
                          + [flatten_mlp(c) for c in state.cluster_classifiers])


def run_federation(config: FederationConfig,
                   oracle_assignment: Array | None = None) -> RunReport:
    """Run the full protocol for config.epochs rounds.

    `oracle_assignment` bypasses similarity clustering with a fixed
    solution (used for controlled comparisons). Fully deterministic per
    config; identical configs produce identical reports.
    """
    config.validate()
    clients, ground_truth = build_clients(config)
    state = initial_state(config, clients)
    counters = ComplexityCounters()

    def metrics_for(round_idx: int, round_stats: dict) -> RoundMetrics:
        g_acc, g_std, p_acc, p_std = evaluate(state, clients)
        ari = adjusted_rand_index(state.solution.assignment, ground_truth)
        return RoundMetrics(round_idx, g_acc, g_std, p_acc, p_std, ari,
                            round_stats.get("ce_loss", float("nan")),
                            round_stats.get("cml_loss", float("nan")))

    history = [metrics_for(0, {})]
    trajectory = [flatten_state(state)]
    final_tensors = None
    for r in range(config.epochs):
        state, clients, tensors, round_stats = run_round(
            state, clients, config, counters, oracle_assignment)
        if tensors is not None:
            final_tensors = tensors
        history.append(metrics_for(r + 1, round_stats))
        trajectory.append(flatten_state(state))
    return RunReport(config, history, state, clients, final_tensors,
                     ground_truth, trajectory, counters)


def fedavg_baseline(config: FederationConfig) -> RunReport:
    """Plain federated averaging: one cluster, no flow phase, no clustering."""
    return run_federation(replace(config, clusters=1, cinn_enabled=False))
