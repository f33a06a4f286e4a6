"""Minimal dense-network numerics: MLPs, softmax cross-entropy, exact backprop, SGD.

Everything here is a pure function over float64 numpy arrays. Hidden layers
are ReLU, the output layer is linear. Gradients are computed by hand-written
reverse mode and are exact for the mean batch loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass
class MlpParams:
    """Weights and biases of a fully-connected net.

    weights[i] has shape (fan_in, fan_out); biases[i] has shape (fan_out,).
    Adjacent layers must chain: weights[i].shape[1] == weights[i+1].shape[0].
    The same structure doubles as the gradient container (one float per
    parameter, congruent layout).
    """

    weights: list[Array]
    biases: list[Array]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


def init_mlp(sizes: list[int], rng: np.random.Generator,
             zero_last: bool = False) -> MlpParams:
    """Initialize an MLP with layer widths `sizes` (len >= 2).

    Weights are uniform in +/- sqrt(6 / (fan_in + fan_out)), biases zero.
    With `zero_last` the final weight matrix is zeroed, so the net starts as
    the constant-zero map while hidden layers stay trainable.
    """
    if len(sizes) < 2:
        raise ValueError(f"need at least two layer sizes, got {sizes}")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if zero_last and i == len(sizes) - 2:
            w = np.zeros((fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _check_chain(params: MlpParams) -> None:
    for i in range(len(params.weights) - 1):
        if params.weights[i].shape[1] != params.weights[i + 1].shape[0]:
            raise ValueError(
                f"layer widths do not chain at layer {i}: "
                f"{params.weights[i].shape} -> {params.weights[i + 1].shape}")


def _as_batch(x: Array) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D input, got shape {x.shape}")
    return x, False


def mlp_forward(params: MlpParams, x: Array) -> Array:
    """Forward pass. Accepts a single sample (1-D) or a batch (2-D)."""
    out, _ = mlp_forward_cached(params, x)
    return out


def mlp_forward_cached(params: MlpParams, x: Array):
    """Forward pass that also returns the cache needed by mlp_backward."""
    _check_chain(params)
    xb, single = _as_batch(x)
    if xb.shape[1] != params.in_dim:
        raise ValueError(
            f"input width {xb.shape[1]} does not match first layer "
            f"width {params.in_dim}")
    n_layers = len(params.weights)
    pre: list[Array] = []
    acts: list[Array] = [xb]
    a = xb
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(a)
    out = a[0] if single else a
    return out, (pre, acts, single)


def mlp_backward(params: MlpParams, cache, grad_out: Array):
    """Reverse-mode pass given d(loss)/d(output).

    Returns (grads, grad_input) where grads is an MlpParams-shaped container
    and grad_input is d(loss)/d(input) with the input's original ndim.
    """
    pre, acts, single = cache
    g, _ = _as_batch(grad_out)
    n_layers = len(params.weights)
    grad_w: list[Array] = [np.empty(0)] * n_layers
    grad_b: list[Array] = [np.empty(0)] * n_layers
    for i in range(n_layers - 1, -1, -1):
        dz = g if i == n_layers - 1 else g * (pre[i] > 0)
        grad_w[i] = acts[i].T @ dz
        grad_b[i] = dz.sum(axis=0)
        g = dz @ params.weights[i].T
    grad_in = g[0] if single else g
    return MlpParams(grad_w, grad_b), grad_in


def backprop(params: MlpParams, x: Array, loss_and_grad):
    """Gradients of a scalar loss of the network output.

    `loss_and_grad(output) -> (loss, d loss / d output)` defines the loss;
    the mean-over-batch convention is the caller's responsibility (fold the
    1/batch factor into the returned gradient).

    Returns (loss, grads, grad_input).
    """
    out, cache = mlp_forward_cached(params, x)
    loss, grad_out = loss_and_grad(out)
    grads, grad_in = mlp_backward(params, cache, grad_out)
    return loss, grads, grad_in


def softmax(logits: Array) -> Array:
    """Numerically stabilized softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Array, labels) -> float:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    loss, _ = softmax_cross_entropy_grad(logits, labels)
    return loss


def softmax_cross_entropy_grad(logits: Array, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    labels are integer class indices; a scalar label goes with a 1-D logits
    vector. Out-of-range labels are rejected.
    """
    lb, single = _as_batch(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != lb.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {lb.shape[0]} logit rows")
    n, c = lb.shape
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range for {c} classes: {y}")
    shifted = lb - lb.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))
    probs = softmax(lb)
    probs[np.arange(n), y] -= 1.0
    grad = probs / n
    return loss, (grad[0] if single else grad)


def sgd_step(params: MlpParams, grads: MlpParams, lr: float) -> MlpParams:
    """One plain SGD update, theta <- theta - lr * g. Pure: returns new params."""
    if len(grads.weights) != len(params.weights):
        raise ValueError("gradient structure does not match parameters")
    for w, gw in zip(params.weights, grads.weights):
        if w.shape != gw.shape:
            raise ValueError(f"gradient shape {gw.shape} != param shape {w.shape}")
    return MlpParams(
        [w - lr * gw for w, gw in zip(params.weights, grads.weights)],
        [b - lr * gb for b, gb in zip(params.biases, grads.biases)],
    )


def zeros_like_mlp(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases])


def add_mlp(a: MlpParams, b: MlpParams) -> MlpParams:
    return MlpParams([x + y for x, y in zip(a.weights, b.weights)],
                     [x + y for x, y in zip(a.biases, b.biases)])


def flatten_mlp(params: MlpParams) -> Array:
    """All parameters as one 1-D vector (weights then bias per layer)."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten_mlp(vec: Array, template: MlpParams) -> MlpParams:
    """Inverse of flatten_mlp for a structurally congruent template."""
    weights, biases = [], []
    idx = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(vec[idx:idx + w.size].reshape(w.shape).copy())
        idx += w.size
        biases.append(vec[idx:idx + b.size].reshape(b.shape).copy())
        idx += b.size
    if idx != vec.size:
        raise ValueError(f"vector length {vec.size} does not match template ({idx})")
    return MlpParams(weights, biases)


def rng_from(seed: int, *tags: int) -> np.random.Generator:
    """Named random substream: one generator per (seed, tag...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))
