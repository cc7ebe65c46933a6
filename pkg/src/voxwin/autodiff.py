"""Minimal dense-tensor reverse-mode differentiation.

Values are double-precision numpy arrays by default.  A :class:`Tape` records
every operation; ``Tape.backward`` replays the records in exact reverse order,
accumulating gradients first into a per-call map and then additively into each
variable's persistent ``grad`` buffer (so running backward twice doubles the
grads exactly).

Only row-wise bias addition broadcasts; every other shape mismatch raises
:class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not match an operation's contract."""


# Dense row-major value storage. numpy arrays carry the (shape, data) pair;
# Var couples one with its gradient buffer.
Tensor = np.ndarray


class Var:
    """A value in the computation graph, with a persistent gradient buffer."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        label = self.name or "var"
        return f"Var({label}, shape={self.data.shape})"


class Parameter(Var):
    """A named trainable variable."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, name=name, dtype=dtype)


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self._records = []

    def record(self, backward_fn):
        self._records.append(backward_fn)

    def __len__(self):
        return len(self._records)

    def backward(self, root: Var, seed=None):
        """Propagate gradients from ``root`` back through every record.

        Gradients accumulate into each visited variable's ``grad``.
        """
        if seed is None:
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != root shape {root.data.shape}")
        grads: dict[Var, np.ndarray] = {root: seed.copy()}
        for fn in reversed(self._records):
            fn(grads)
        for var, g in grads.items():
            var.grad += g


def _accum(grads, var, delta):
    if var in grads:
        grads[var] += delta
    else:
        grads[var] = delta


def matmul(tape: Tape, a: Var, b: Var) -> Var:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = Var(a.data @ b.data)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        _accum(grads, a, g @ b.data.T)
        _accum(grads, b, a.data.T @ g)

    tape.record(bwd)
    return out


def add(tape: Tape, a: Var, b: Var) -> Var:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Var(a.data + b.data)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        _accum(grads, a, g)
        _accum(grads, b, g.copy())

    tape.record(bwd)
    return out


def add_bias(tape: Tape, x: Var, bias: Var) -> Var:
    """Row-wise bias: the only broadcast this engine permits."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(f"add_bias: {x.data.shape} + {bias.data.shape}")
    out = Var(x.data + bias.data)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        _accum(grads, x, g)
        _accum(grads, bias, g.sum(axis=0))

    tape.record(bwd)
    return out


def linear(tape: Tape, x: Var, w: Var, b: Var | None = None) -> Var:
    out = matmul(tape, x, w)
    if b is not None:
        out = add_bias(tape, out, b)
    return out


def relu(tape: Tape, x: Var) -> Var:
    mask = x.data > 0
    out = Var(np.where(mask, x.data, 0.0))

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        _accum(grads, x, g * mask)

    tape.record(bwd)
    return out


def gelu(tape: Tape, x: Var) -> Var:
    """Smooth (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Var(xd * cdf)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        _accum(grads, x, g * (cdf + xd * pdf))

    tape.record(bwd)
    return out


def layer_norm(tape: Tape, x: Var, gamma: Var, beta: Var, eps: float = LAYER_NORM_EPS) -> Var:
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects N x C input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("layer_norm: gamma/beta must match channel width")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Var(xhat * gamma.data + beta.data)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        _accum(grads, gamma, (g * xhat).sum(axis=0))
        _accum(grads, beta, g.sum(axis=0))
        gx = g * gamma.data
        dx = inv_std * (
            gx
            - gx.mean(axis=1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        _accum(grads, x, dx)

    tape.record(bwd)
    return out


def batch_norm(
    tape: Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = BATCH_NORM_EPS,
) -> Var:
    """Per-channel batch norm over the voxel axis.

    In training mode batch statistics are used and the running buffers are
    updated in place (``running = momentum * running + (1-momentum) * batch``).
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm expects N x C input, got {x.data.shape}")
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean[...] = momentum * running_mean + (1.0 - momentum) * mu
        running_var[...] = momentum * running_var + (1.0 - momentum) * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Var(xhat * gamma.data + beta.data)
    n = x.data.shape[0]

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        _accum(grads, gamma, (g * xhat).sum(axis=0))
        _accum(grads, beta, g.sum(axis=0))
        gx = g * gamma.data
        if training:
            dx = inv_std * (
                gx - gx.mean(axis=0) - xhat * (gx * xhat).sum(axis=0) / n
            )
        else:
            dx = gx * inv_std
        _accum(grads, x, dx)

    tape.record(bwd)
    return out


def mlp_block(tape: Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    """Linear -> GELU -> Linear, the transformer feed-forward."""
    h = gelu(tape, add_bias(tape, matmul(tape, x, w1), b1))
    return add_bias(tape, matmul(tape, h, w2), b2)


def softmax_cross_entropy(tape: Tape, logits: Var, labels) -> Var:
    """Mean negative log-likelihood over rows; labels are class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = -log_probs[np.arange(n), labels].mean()
    out = Var(loss)
    softmax = np.exp(log_probs)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        onehot = np.zeros_like(softmax)
        onehot[np.arange(n), labels] = 1.0
        _accum(grads, logits, float(g) * (softmax - onehot) / n)

    tape.record(bwd)
    return out


def gather_rows(tape: Tape, x: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(x.data[idx])

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(grads, x, dx)

    tape.record(bwd)
    return out


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws outside two standard deviations resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def finite_difference_gradient(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, the test oracle."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative disagreement between two arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)
