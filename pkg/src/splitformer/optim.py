"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``param.data``.

    Parameters without a grad entry are left untouched and keep stale
    moments; callers should pass a grad (possibly zero) for every param
    they want stepped.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        if name not in params:
            raise KeyError(f"adam_step: grad for unknown param {name!r}")
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} vs param {p.data.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Pull .grad off every param, zero-filling the ones never reached."""
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. Guards against the post-convergence failure
    mode of Adam: once gradients go quiet the second moments decay, and a
    single hard example can then produce a step large enough to wipe out
    the learned weights.
    """
    if max_norm <= 0:
        raise ValueError(f"clip_global_norm: max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
