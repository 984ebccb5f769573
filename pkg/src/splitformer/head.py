"""Classification head: two linear layers around a dropout, then softmax.

Reads the 8D-wide CLS feature that the final stage produces in row 0.
There is deliberately no activation between the linears; the head only
transforms dimensions (8D -> 4D -> 2) before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float = 0.2

    @classmethod
    def create(cls, d: int, rng, dtype=np.float32, dropout: float = 0.2) -> "HeadParams":
        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, dtype=dtype)

        def z(shape):
            return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

        return cls(w1=w((8 * d, 4 * d)), b1=z(4 * d), w2=w((4 * d, 2)), b2=z(2), dropout=dropout)

    @property
    def in_width(self) -> int:
        return self.w1.shape[0]

    def named(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


def head_logits(
    cls_batch: Tensor, p: HeadParams, mode: str = "eval", rng: np.random.Generator | None = None
) -> Tensor:
    """(N, 8D) CLS features -> (N, 2) pre-softmax scores."""
    if cls_batch.ndim != 2 or cls_batch.shape[1] != p.in_width:
        raise ValueError(f"head: input {cls_batch.shape} vs width {p.in_width}")
    h = ops.add(ops.matmul(cls_batch, p.w1), p.b1)
    h = ops.dropout(h, p.dropout, rng, train=(mode == "train"))
    return ops.add(ops.matmul(h, p.w2), p.b2)


def classify(
    cls_vec, p: HeadParams, mode: str = "eval", rng: np.random.Generator | None = None
) -> Tensor:
    """One CLS feature vector -> 2 class probabilities."""
    x = cls_vec if isinstance(cls_vec, Tensor) else Tensor(cls_vec, dtype=p.w1.dtype)
    logits = head_logits(ops.reshape(x, (1, p.in_width)), p, mode, rng)
    return ops.reshape(ops.softmax_rows(logits), (2,))
