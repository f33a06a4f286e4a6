"""Conditional invertible network: stacked affine coupling blocks.

Each block splits the latent vector into halves and applies two scale/shift
passes driven by small MLP subnets that see the other half concatenated with
a one-hot condition vector. The scale outputs are soft-clamped so exp() can
never overflow, the inverse is exact, and the log-Jacobian-determinant is the
sum of the clamped scale outputs.

Conditioning uses label_space_size + 1 one-hot slots; the extra slot is the
synthetic "unknown" label tied to standard-normal inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (Array, MlpParams, flatten_mlp, init_mlp, mlp_backward,
                 mlp_forward_cached, sgd_step, unflatten_mlp)

SUBNET_NAMES = ("scale1", "shift1", "scale2", "shift2")


@dataclass
class CouplingBlockParams:
    """One affine coupling block: four subnets plus the scale clamp bound."""

    scale1: MlpParams
    shift1: MlpParams
    scale2: MlpParams
    shift2: MlpParams
    clamp: float = 2.0

    def subnets(self) -> list[MlpParams]:
        return [self.scale1, self.shift1, self.scale2, self.shift2]


@dataclass
class CouplingBlockGrads:
    scale1: MlpParams
    shift1: MlpParams
    scale2: MlpParams
    shift2: MlpParams

    def subnets(self) -> list[MlpParams]:
        return [self.scale1, self.shift1, self.scale2, self.shift2]


@dataclass
class CinnParams:
    """Stack of coupling blocks with a fixed latent permutation before each."""

    blocks: list[CouplingBlockParams]
    permutations: list[Array]
    latent_dim: int
    condition_dim: int

    def copy(self) -> "CinnParams":
        return CinnParams([CouplingBlockParams(*[s.copy() for s in b.subnets()], b.clamp)
                           for b in self.blocks],
                          [p.copy() for p in self.permutations],
                          self.latent_dim, self.condition_dim)


@dataclass
class CinnGrads:
    blocks: list[CouplingBlockGrads]


def init_cinn(latent_dim: int, condition_dim: int, n_blocks: int,
              hidden: int, clamp: float, rng: np.random.Generator) -> CinnParams:
    """Build a coupling stack that starts as the identity map.

    Subnets are two-layer MLPs (half + condition -> hidden -> half) whose
    final weight matrix is zeroed, so scale and shift start at zero while
    gradients still flow through the hidden layer.
    """
    if latent_dim % 2 != 0 or latent_dim <= 0:
        raise ValueError(f"latent_dim must be even and positive, got {latent_dim}")
    if condition_dim <= 0:
        raise ValueError(f"condition_dim must be positive, got {condition_dim}")
    half = latent_dim // 2
    sizes = [half + condition_dim, hidden, half]
    blocks, perms = [], []
    for _ in range(n_blocks):
        subnets = [init_mlp(sizes, rng, zero_last=True) for _ in SUBNET_NAMES]
        blocks.append(CouplingBlockParams(*subnets, clamp=float(clamp)))
        perms.append(rng.permutation(latent_dim))
    return CinnParams(blocks, perms, latent_dim, condition_dim)


def soft_clamp(raw: Array, clamp: float) -> Array:
    """Squash raw scale outputs into (-clamp, clamp) via atan."""
    return clamp * (2.0 / np.pi) * np.arctan(raw)


def _soft_clamp_deriv(raw: Array, clamp: float) -> Array:
    return clamp * (2.0 / np.pi) / (1.0 + raw * raw)


def _as_batch_pair(u: Array, cond: Array, latent_dim: int, condition_dim: int):
    u = np.asarray(u, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    single = u.ndim == 1
    if single:
        u = u[None, :]
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (u.shape[0], cond.shape[0]))
    if u.shape[1] != latent_dim:
        raise ValueError(f"latent width {u.shape[1]} != {latent_dim}")
    if cond.shape != (u.shape[0], condition_dim):
        raise ValueError(f"condition shape {cond.shape} != ({u.shape[0]}, {condition_dim})")
    return u, cond, single


def coupling_forward(block: CouplingBlockParams, u: Array, cond: Array):
    """Affine coupling transform. Returns (v, logdet per sample)."""
    v, logdet, _ = _coupling_forward_cached(block, u, cond)
    return v, logdet


def _coupling_forward_cached(block: CouplingBlockParams, u: Array, cond: Array):
    latent_dim = 2 * block.scale1.out_dim
    cond_dim = block.scale1.in_dim - block.scale1.out_dim
    u, cond, single = _as_batch_pair(u, cond, latent_dim, cond_dim)
    half = latent_dim // 2
    u1, u2 = u[:, :half], u[:, half:]

    h1 = np.concatenate([u2, cond], axis=1)
    s1_raw, s1_cache = mlp_forward_cached(block.scale1, h1)
    t1, t1_cache = mlp_forward_cached(block.shift1, h1)
    s1 = soft_clamp(s1_raw, block.clamp)
    v1 = u1 * np.exp(s1) + t1

    h2 = np.concatenate([v1, cond], axis=1)
    s2_raw, s2_cache = mlp_forward_cached(block.scale2, h2)
    t2, t2_cache = mlp_forward_cached(block.shift2, h2)
    s2 = soft_clamp(s2_raw, block.clamp)
    v2 = u2 * np.exp(s2) + t2

    v = np.concatenate([v1, v2], axis=1)
    logdet = s1.sum(axis=1) + s2.sum(axis=1)
    cache = (u1, u2, s1_raw, s1, s1_cache, t1_cache, v1,
             s2_raw, s2, s2_cache, t2_cache)
    if single:
        return v[0], float(logdet[0]), cache
    return v, logdet, cache


def coupling_inverse(block: CouplingBlockParams, v: Array, cond: Array) -> Array:
    """Exact left-inverse of coupling_forward."""
    latent_dim = 2 * block.scale1.out_dim
    cond_dim = block.scale1.in_dim - block.scale1.out_dim
    v, cond, single = _as_batch_pair(v, cond, latent_dim, cond_dim)
    half = latent_dim // 2
    v1, v2 = v[:, :half], v[:, half:]

    h2 = np.concatenate([v1, cond], axis=1)
    s2 = soft_clamp(mlp_forward_cached(block.scale2, h2)[0], block.clamp)
    t2 = mlp_forward_cached(block.shift2, h2)[0]
    u2 = (v2 - t2) * np.exp(-s2)

    h1 = np.concatenate([u2, cond], axis=1)
    s1 = soft_clamp(mlp_forward_cached(block.scale1, h1)[0], block.clamp)
    t1 = mlp_forward_cached(block.shift1, h1)[0]
    u1 = (v1 - t1) * np.exp(-s1)

    u = np.concatenate([u1, u2], axis=1)
    return u[0] if single else u


def _coupling_backward(block: CouplingBlockParams, cache, grad_v: Array,
                       grad_logdet: Array):
    """Reverse-mode pass through one block.

    grad_v is d(loss)/d(v); grad_logdet is d(loss)/d(block logdet) per sample.
    Returns (CouplingBlockGrads, grad_u).
    """
    (u1, u2, s1_raw, s1, s1_cache, t1_cache, v1,
     s2_raw, s2, s2_cache, t2_cache) = cache
    half = u1.shape[1]
    gv1, gv2 = grad_v[:, :half], grad_v[:, half:]
    gld = grad_logdet[:, None]

    # second pass: v2 = u2 * exp(s2(h2)) + t2(h2), h2 = [v1, cond]
    exp_s2 = np.exp(s2)
    d_s2 = gv2 * u2 * exp_s2 + gld
    d_s2_raw = d_s2 * _soft_clamp_deriv(s2_raw, block.clamp)
    g_scale2, gh2_a = mlp_backward(block.scale2, s2_cache, d_s2_raw)
    g_shift2, gh2_b = mlp_backward(block.shift2, t2_cache, gv2)
    gh2 = gh2_a + gh2_b
    gu2 = gv2 * exp_s2

    # first pass: v1 = u1 * exp(s1(h1)) + t1(h1), h1 = [u2, cond]
    gv1_total = gv1 + gh2[:, :half]
    exp_s1 = np.exp(s1)
    d_s1 = gv1_total * u1 * exp_s1 + gld
    d_s1_raw = d_s1 * _soft_clamp_deriv(s1_raw, block.clamp)
    g_scale1, gh1_a = mlp_backward(block.scale1, s1_cache, d_s1_raw)
    g_shift1, gh1_b = mlp_backward(block.shift1, t1_cache, gv1_total)
    gh1 = gh1_a + gh1_b

    gu1 = gv1_total * exp_s1
    gu2 = gu2 + gh1[:, :half]
    grads = CouplingBlockGrads(g_scale1, g_shift1, g_scale2, g_shift2)
    return grads, np.concatenate([gu1, gu2], axis=1)


def cinn_forward(params: CinnParams, z: Array, cond: Array):
    """Map latent z to the normalized output. Returns (eps, logdet per sample)."""
    eps, logdet, _ = _cinn_forward_cached(params, z, cond)
    return eps, logdet


def _cinn_forward_cached(params: CinnParams, z: Array, cond: Array):
    z, cond, single = _as_batch_pair(z, cond, params.latent_dim, params.condition_dim)
    total_logdet = np.zeros(z.shape[0])
    caches = []
    x = z
    for block, perm in zip(params.blocks, params.permutations):
        u = x[:, perm]
        x, logdet, cache = _coupling_forward_cached(block, u, cond)
        total_logdet += logdet
        caches.append(cache)
    if single:
        return x[0], float(total_logdet[0]), caches
    return x, total_logdet, caches


def cinn_inverse(params: CinnParams, eps: Array, cond: Array) -> Array:
    """Exact inverse: blocks in reverse order, each permutation undone."""
    eps, cond, single = _as_batch_pair(eps, cond, params.latent_dim, params.condition_dim)
    x = eps
    for block, perm in zip(reversed(params.blocks), reversed(params.permutations)):
        u = coupling_inverse(block, x, cond)
        x = np.empty_like(u)
        x[:, perm] = u
    return x[0] if single else x


def cinn_backward(params: CinnParams, caches, grad_eps: Array, grad_logdet: Array):
    """Reverse-mode pass through the whole stack.

    Returns (CinnGrads, grad_z). grad_logdet applies to every block's summand.
    """
    g = grad_eps
    block_grads: list[CouplingBlockGrads] = [None] * len(params.blocks)  # type: ignore
    for i in range(len(params.blocks) - 1, -1, -1):
        grads, gu = _coupling_backward(params.blocks[i], caches[i], g, grad_logdet)
        block_grads[i] = grads
        g = np.empty_like(gu)
        g[:, params.permutations[i]] = gu
    return CinnGrads(block_grads), g


def grad_global_norm(grads: CinnGrads) -> float:
    total = 0.0
    for block in grads.blocks:
        for subnet in block.subnets():
            for arr in (*subnet.weights, *subnet.biases):
                total += float((arr * arr).sum())
    return float(np.sqrt(total))


def clip_cinn_grads(grads: CinnGrads, max_norm: float) -> CinnGrads:
    """Rescale the whole gradient to global norm max_norm when it exceeds it.

    Keeps plain-SGD flow training bounded: encoded-feature norms grow during
    classifier training and unclipped likelihood gradients can overflow.
    """
    norm = grad_global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return CinnGrads([CouplingBlockGrads(
        *[MlpParams([w * scale for w in s.weights], [b * scale for b in s.biases])
          for s in block.subnets()]) for block in grads.blocks])


def cinn_sgd_step(params: CinnParams, grads: CinnGrads, lr: float) -> CinnParams:
    """Plain SGD on every subnet; permutations and clamp are untouched."""
    new_blocks = []
    for block, g in zip(params.blocks, grads.blocks):
        subnets = [sgd_step(p, gp, lr) for p, gp in zip(block.subnets(), g.subnets())]
        new_blocks.append(CouplingBlockParams(*subnets, clamp=block.clamp))
    return CinnParams(new_blocks, params.permutations, params.latent_dim,
                      params.condition_dim)


def flatten_cinn(params: CinnParams) -> Array:
    return np.concatenate([flatten_mlp(s) for b in params.blocks for s in b.subnets()])


def unflatten_cinn(vec: Array, template: CinnParams) -> CinnParams:
    blocks = []
    idx = 0
    for block in template.blocks:
        subnets = []
        for s in block.subnets():
            size = flatten_mlp(s).size
            subnets.append(unflatten_mlp(vec[idx:idx + size], s))
            idx += size
        blocks.append(CouplingBlockParams(*subnets, clamp=block.clamp))
    if idx != vec.size:
        raise ValueError(f"vector length {vec.size} does not match template ({idx})")
    return CinnParams(blocks, [p.copy() for p in template.permutations],
                      template.latent_dim, template.condition_dim)


def unknown_label(label_space_size: int) -> int:
    """Index of the extra condition slot reserved for synthetic data."""
    return label_space_size


def one_hot(labels, num_slots: int) -> Array:
    """One-hot encode integer labels over num_slots condition slots."""
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.min() < 0 or y.max() >= num_slots:
        raise ValueError(f"label out of range for {num_slots} slots: {y}")
    out = np.zeros((y.shape[0], num_slots))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def sample_synthetic(latent_dim: int, label_space_size: int, absent_labels,
                     batch: int, rng: np.random.Generator):
    """Draw standard-normal inputs paired with out-of-distribution labels.

    Labels are drawn uniformly from absent_labels plus the unknown slot, so
    the support is never empty even for a client holding every label.
    Returns (z, y) with z shaped (batch, latent_dim) and y integer labels.
    """
    absent = set(int(a) for a in absent_labels)
    bad = [a for a in absent if not 0 <= a <= label_space_size]
    if bad:
        raise ValueError(f"absent labels outside the label space: {bad}")
    support = np.array(sorted(absent | {unknown_label(label_space_size)}))
    z = rng.standard_normal((batch, latent_dim))
    y = support[rng.integers(0, len(support), size=batch)]
    return z, y


def cml_loss(params: CinnParams, z: Array, labels, z_syn: Array | None,
             labels_syn, alpha: float) -> float:
    """Conditional maximum-likelihood loss over paired real/synthetic batches.

    Per pair: (|out(z)|^2 + alpha * |out(z_syn)|^2) / 2 minus both samples'
    log-Jacobian-determinants, averaged over the batch. With z_syn None the
    synthetic terms are dropped entirely (the un-augmented ablation).
    """
    loss, _ = cml_loss_and_grads(params, z, labels, z_syn, labels_syn, alpha)
    return loss


def cml_loss_and_grads(params: CinnParams, z: Array, labels,
                       z_syn: Array | None, labels_syn, alpha: float):
    """Loss plus exact gradients w.r.t. every subnet parameter.

    Real and synthetic rows go through the network as one batch; alpha scales
    only the synthetic norm term, not its logdet summand.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z_syn is not None:
        z_syn = np.asarray(z_syn, dtype=np.float64)
        if z_syn.shape[0] != n:
            raise ValueError(
                f"synthetic batch size {z_syn.shape[0]} != real batch size {n}")
        y_syn = np.atleast_1d(np.asarray(labels_syn, dtype=np.int64))
        batch = np.concatenate([z, z_syn], axis=0)
        all_labels = np.concatenate([y, y_syn])
        norm_weight = np.concatenate([np.ones(n), np.full(n, alpha)])
    else:
        batch = z
        all_labels = y
        norm_weight = np.ones(n)

    cond = one_hot(all_labels, params.condition_dim)
    eps, logdet, caches = _cinn_forward_cached(params, batch, cond)
    sq_norms = (eps * eps).sum(axis=1)
    loss = float((norm_weight * sq_norms).sum() / (2.0 * n) - logdet.sum() / n)

    grad_eps = norm_weight[:, None] * eps / n
    grad_logdet = np.full(batch.shape[0], -1.0 / n)
    grads, _ = cinn_backward(params, caches, grad_eps, grad_logdet)
    return loss, grads
