"""Differentiable operations on Tensors.

Each op computes its result with numpy, then registers a backward
closure on the active tape via :func:`splitformer.tensor.record`. The
closure receives the output gradient and returns one gradient (or None)
per input, matching input shapes exactly. Ops never mutate their inputs.

Binary ops require matching dtypes; constants are cast to the tensor's
dtype so a float64 test graph stays float64 end to end.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .tensor import Tensor, record

MASK_FILL = -1e9  # additive pre-softmax penalty for masked scores


def _out(data: np.ndarray) -> Tensor:
    return Tensor(data)


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; *b* may be a 1-d bias broadcast over the last axis."""
    _check_same_dtype("add", a, b)
    if a.shape == b.shape:
        out = _out(a.data + b.data)
        return record("add", (a, b), out, lambda g: (g, g))
    if b.ndim == 1 and a.shape[-1] == b.shape[0]:
        out = _out(a.data + b.data)
        axes = tuple(range(a.ndim - 1))
        return record("add_bias", (a, b), out, lambda g: (g, g.sum(axis=axes)))
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = _out(a.data - b.data)
    return record("sub", (a, b), out, lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    out = _out(-a.data)
    return record("neg", (a,), out, lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = _out(a.data * b.data)
    return record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = _out(a.data * s)
    return record("scale", (a,), out, lambda g: (g * s,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable array broadcastable to a.shape."""
    c = np.asarray(c, dtype=a.data.dtype)
    data = a.data * c
    if data.shape != a.shape:
        raise ValueError(f"mul_const: {c.shape} does not broadcast into {a.shape}")
    out = _out(data)
    return record("mul_const", (a,), out, lambda g: (g * c,))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array broadcastable to a.shape."""
    c = np.asarray(c, dtype=a.data.dtype)
    data = a.data + c
    if data.shape != a.shape:
        raise ValueError(f"add_const: {c.shape} does not broadcast into {a.shape}")
    out = _out(data)
    return record("add_const", (a,), out, lambda g: (g,))


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product or 3-d batched product with equal batch dims."""
    _check_same_dtype("matmul", a, b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
        out = _out(a.data @ b.data)
        return record(
            "matmul", (a, b), out,
            lambda g: (g @ b.data.T, a.data.T @ g),
        )
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ValueError(f"matmul: batched dims {a.shape} @ {b.shape}")
        out = _out(np.matmul(a.data, b.data))
        return record(
            "bmm", (a, b), out,
            lambda g: (
                np.matmul(g, b.data.transpose(0, 2, 1)),
                np.matmul(a.data.transpose(0, 2, 1), g),
            ),
        )
    raise ValueError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = _out(a.data.transpose(axes))
    return record("permute", (a,), out, lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _out(a.data.reshape(shape))
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    _check_same_dtype("concat", *tensors)
    out = _out(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), out, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along the leading axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise ValueError(f"slice_rows: [{start}:{stop}] outside {a.shape[0]} rows")
    out = _out(a.data[start:stop].copy())

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return record("slice_rows", (a,), out, bwd)


def window_rows(a: Tensor, stride: int, width: int) -> tuple[Tensor, np.ndarray]:
    """Gather overlapping row windows: window j covers rows [j*stride, j*stride+width).

    Returns a (k, width, cols) tensor with k = ceil(rows / stride) and a
    boolean (k, width) validity mask; rows past the end come back as
    zeros with valid=False. Consecutive windows overlap when
    width > stride, so the backward pass scatter-adds.
    """
    if a.ndim != 2:
        raise ValueError(f"window_rows: need a 2-d tensor, got {a.shape}")
    if stride < 1 or width < stride:
        raise ValueError(f"window_rows: need width >= stride >= 1, got stride={stride} width={width}")
    rows = a.shape[0]
    k = -(-rows // stride)
    idx = np.arange(k)[:, None] * stride + np.arange(width)[None, :]
    valid = idx < rows
    safe = np.where(valid, idx, 0)
    data = a.data[safe] * valid[:, :, None]
    out = _out(data)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, safe, g * valid[:, :, None])
        return (ga,)

    return record("window_rows", (a,), out, bwd), valid


def embed_rows(values: Tensor, indices: np.ndarray, total: int) -> Tensor:
    """Scatter value rows into a zero matrix of *total* rows.

    indices must be unique and in range; rows not named stay zero.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if values.ndim != 2 or indices.shape != (values.shape[0],):
        raise ValueError(f"embed_rows: values {values.shape} vs indices {indices.shape}")
    if len(np.unique(indices)) != len(indices):
        raise ValueError("embed_rows: duplicate target rows")
    if indices.size and (indices.min() < 0 or indices.max() >= total):
        raise ValueError(f"embed_rows: index out of range for {total} rows")
    data = np.zeros((total, values.shape[1]), dtype=values.data.dtype)
    data[indices] = values.data
    out = _out(data)
    return record("embed_rows", (values,), out, lambda g: (g[indices],))


# -- pointwise nonlinearities ------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = _out(np.exp(a.data))
    return record("exp", (a,), out, lambda g: (g * out.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through unclipped entries."""
    out = _out(np.clip(a.data, lo, hi))
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return record("clamp", (a,), out, lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    out = _out(np.maximum(a.data, 0))
    mask = (a.data > 0).astype(a.data.dtype)
    return record("relu", (a,), out, lambda g: (g * mask,))


# python floats: numpy scalar constants would promote float32 arrays
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _out(x * cdf)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    local = (cdf + x * pdf).astype(x.dtype)
    return record("gelu", (a,), out, lambda g: (g * local,))


# -- reductions --------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = _out(np.asarray(a.data.sum(), dtype=a.data.dtype))
    return record("sum_all", (a,), out, lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ValueError("mean_all of an empty tensor")
    return scale(sum_all(a), 1.0 / a.data.size)


# -- normalization, attention math, regularization ---------------------------


def softmax_rows(a: Tensor, mask: np.ndarray | None = None, silent: bool = False) -> Tensor:
    """Softmax over the last axis with optional boolean keep-mask.

    Masked entries get an additive MASK_FILL before the max-shift and
    their probabilities are forced to exact zeros afterwards. Rows with
    nothing left to attend to come back as all zeros; that normally
    earns a warning, silenced by internal callers that pad the tail of
    a sequence and already account for it.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError(f"softmax_rows: mask {mask.shape} vs scores {x.shape}")
        x = x + (~mask) * np.asarray(MASK_FILL, dtype=x.dtype)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = e * mask
    denom = e.sum(axis=-1, keepdims=True)
    dead = denom == 0
    if dead.any() and not silent:
        warnings.warn("softmax_rows: fully masked rows produce all-zero attention", stacklevel=2)
    np.maximum(denom, np.finfo(x.dtype).tiny, out=denom)
    y = e / denom
    out = _out(y)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return record("softmax_rows", (a,), out, bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    _check_same_dtype("layer_norm", a, gamma, beta)
    dim = a.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ValueError(f"layer_norm: gamma/beta must be ({dim},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _out(xhat * gamma.data + beta.data)

    def bwd(g):
        gxhat = g * gamma.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gxhat - m1 - xhat * m2)
        axes = tuple(range(a.ndim - 1))
        return (ga, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return record("layer_norm", (a, gamma, beta), out, bwd)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    update_rate: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, dtype=np.float64) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(dim, dtype=dtype),
            running_var=np.ones(dim, dtype=dtype),
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.running_mean.copy(), self.running_var.copy(), self.update_rate, self.eps
        )


def batch_norm(a: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Batch normalization over axis 0 of a 2-d tensor.

    Training uses batch statistics (biased variance in the transform,
    unbiased in the running update) and mutates *state*; eval normalizes
    with the stored running statistics. Training needs at least 2 rows.
    """
    _check_same_dtype("batch_norm", a, gamma, beta)
    if a.ndim != 2:
        raise ValueError(f"batch_norm: need a 2-d tensor, got {a.shape}")
    n, dim = a.shape
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ValueError(f"batch_norm: gamma/beta must be ({dim},)")

    if train:
        if n < 2:
            raise ValueError("batch_norm: training statistics need at least 2 rows")
        mu = a.data.mean(axis=0)
        centered = a.data - mu
        var = (centered * centered).mean(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv
        r = state.update_rate
        state.running_mean = (1 - r) * state.running_mean + r * mu
        state.running_var = (1 - r) * state.running_var + r * var * n / (n - 1)
        out = _out(xhat * gamma.data + beta.data)

        def bwd(g):
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=0)
            m2 = (gxhat * xhat).mean(axis=0)
            ga = inv * (gxhat - m1 - xhat * m2)
            return (ga, (g * xhat).sum(axis=0), g.sum(axis=0))

        return record("batch_norm", (a, gamma, beta), out, bwd)

    inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(a.data.dtype)
    mean = state.running_mean.astype(a.data.dtype)
    xhat = (a.data - mean) * inv
    out = _out(xhat * gamma.data + beta.data)

    def bwd_eval(g):
        return (g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0))

    return record("batch_norm_eval", (a, gamma, beta), out, bwd_eval)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: zero with probability *rate*, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul_const(a, keep)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under given probabilities.

    Probabilities below 1e-12 are clamped inside the log; clamped entries
    pass no gradient, matching the flat region of the clamp.
    """
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("cross_entropy: label outside class range")
    n = labels.shape[0]
    picked = probs.data[np.arange(n), labels]
    safe = np.maximum(picked, 1e-12)
    out = _out(np.asarray(-np.log(safe).mean(), dtype=probs.data.dtype))

    def bwd(g):
        gp = np.zeros_like(probs.data)
        gp[np.arange(n), labels] = -g * (picked >= 1e-12) / (n * safe)
        return (gp,)

    return record("cross_entropy", (probs,), out, bwd)
