"""Multi-head attention, the sliding-window split, and both windowed variants.

Full MHA stores an H x H score matrix per head; on histories of tens of
thousands of behaviors that is the piece that exhausts memory. The
split variant (sw_mha) slides a width-W window with stride lambda along
the sequence, runs multi-head attention inside each window
independently, and flattens every window's W x eta output into a single
row. The sequence shrinks from H rows to k = ceil(H/lambda) rows while
score storage drops from n*H^2 to k*n*W^2 scalars. Inter-window
attention (w_mha) is then ordinary MHA on the k window rows.

A module-level counter tracks how many attention scores each call
materializes, which is exactly the quantity the benchmark compares
between the full and windowed paths.

Masking: padded source positions are excluded as keys (their attention
probability is exactly zero), their query rows are zeroed before the
flatten, and windows consisting purely of padding are masked again at
the w_mha level. Perturbing padded content therefore cannot change any
output bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor

PE_KINDS = ("none", "APE", "TPE")

# -- score-storage accounting -------------------------------------------------

_SCORE_COUNT = [0]


def reset_score_count() -> None:
    _SCORE_COUNT[0] = 0


def score_count() -> int:
    """Attention scores materialized since the last reset."""
    return _SCORE_COUNT[0]


def _count_scores(n: int) -> None:
    _SCORE_COUNT[0] += int(n)


# -- positional encodings ------------------------------------------------------


def positional_encoding(
    length: int, dim: int, kind: str, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Build a (length, dim) positional table.

    "none" is all zeros, "APE" the fixed sinusoidal table
    PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(same), and
    "TPE" draws a trainable-table initialization from N(0, 0.02^2);
    the caller owns wrapping that one in a parameter.
    """
    if kind not in PE_KINDS:
        raise ValueError(f"unknown positional encoding kind {kind!r}")
    if kind == "none":
        return np.zeros((length, dim))
    if kind == "TPE":
        if rng is None:
            raise ValueError("TPE initialization needs an rng")
        return rng.normal(0.0, 0.02, size=(length, dim))
    if dim % 2 != 0:
        raise ValueError(f"APE needs an even dim, got {dim}")
    pos = np.arange(length)[:, None]
    freq = np.power(10000.0, -np.arange(0, dim, 2) / dim)[None, :]
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


@dataclass(frozen=True)
class PeConfig:
    """Which encoding each level uses; assembled models support none/APE."""

    sw: str = "APE"
    w: str = "APE"

    def __post_init__(self):
        for kind in (self.sw, self.w):
            if kind not in PE_KINDS:
                raise ValueError(f"unknown positional encoding kind {kind!r}")


def _maybe_add_pe(x: Tensor, kind: str) -> Tensor:
    if kind == "none":
        return x
    if kind == "TPE":
        raise ValueError("TPE tables are parameters; add them before calling attention")
    return ops.add_const(x, positional_encoding(x.shape[0], x.shape[1], kind))


# -- parameters ----------------------------------------------------------------


@dataclass
class MhaParams:
    """Projection weights for one attention layer; eta = n_heads * head_dim."""

    n_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wm: Tensor

    @classmethod
    def create(cls, eta: int, n_heads: int, rng, dtype=np.float32) -> "MhaParams":
        if eta % n_heads != 0:
            raise ValueError(f"eta {eta} not divisible by {n_heads} heads")

        def w():
            return Tensor(rng.normal(0.0, 0.02, size=(eta, eta)), requires_grad=True, dtype=dtype)

        return cls(n_heads=n_heads, wq=w(), wk=w(), wv=w(), wm=w())

    @property
    def eta(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.eta // self.n_heads

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("wq", "wk", "wv", "wm")}


# -- scaled dot-product core ----------------------------------------------------


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over 2-d inputs; masked keys get zero weight."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(f"scaled_dot_attention: shapes q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[1]
    scores = ops.scale(ops.matmul(q, ops.permute(k, (1, 0))), 1.0 / math.sqrt(d))
    _count_scores(q.shape[0] * k.shape[0])
    mask = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (k.shape[0],):
            raise ValueError(f"scaled_dot_attention: key_mask {key_mask.shape} vs {k.shape[0]} keys")
        mask = np.broadcast_to(key_mask, scores.shape)
    probs = ops.softmax_rows(scores, mask=mask)
    return ops.matmul(probs, v)


def _project(x: Tensor, p: MhaParams) -> tuple[Tensor, Tensor, Tensor]:
    return ops.matmul(x, p.wq), ops.matmul(x, p.wk), ops.matmul(x, p.wv)


def _split_heads(x: Tensor, n: int, d: int) -> Tensor:
    """(rows, n*d) -> (n, rows, d)."""
    return ops.permute(ops.reshape(x, (x.shape[0], n, d)), (1, 0, 2))


def mha(
    x: Tensor,
    p: MhaParams,
    key_mask: np.ndarray | None = None,
    pe: str = "none",
    silent_mask: bool = False,
) -> Tensor:
    """Standard multi-head attention; output shape equals input shape."""
    if x.ndim != 2 or x.shape[1] != p.eta:
        raise ValueError(f"mha: input {x.shape} vs eta {p.eta}")
    h = x.shape[0]
    n, d = p.n_heads, p.head_dim
    x = _maybe_add_pe(x, pe)
    q, k, v = _project(x, p)
    qh = _split_heads(q, n, d)
    kh = _split_heads(k, n, d)
    vh = _split_heads(v, n, d)
    scores = ops.scale(ops.matmul(qh, ops.permute(kh, (0, 2, 1))), 1.0 / math.sqrt(d))
    _count_scores(n * h * h)
    mask = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (h,):
            raise ValueError(f"mha: key_mask {key_mask.shape} vs {h} rows")
        mask = np.broadcast_to(key_mask[None, None, :], (n, h, h))
    probs = ops.softmax_rows(scores, mask=mask, silent=silent_mask)
    out = ops.matmul(probs, vh)  # (n, h, d)
    merged = ops.reshape(ops.permute(out, (1, 0, 2)), (h, n * d))
    return ops.matmul(merged, p.wm)


# -- sliding-window split --------------------------------------------------------


@dataclass
class WindowBatch:
    """k windows of W rows each; valid flags positions inside the source."""

    windows: Tensor  # (k, W, cols)
    valid: np.ndarray  # (k, W) bool
    source_len: int
    stride: int
    window: int

    @property
    def k(self) -> int:
        return self.windows.shape[0]


def window_count(h: int, stride: int) -> int:
    return -(-h // stride)


def sw_split(x: Tensor, window: int, stride: int) -> WindowBatch:
    """Slice an (H, cols) sequence into k = ceil(H/stride) windows.

    Window j covers source rows [j*stride, j*stride + window); rows past
    the end are zero-filled padding with valid=false. stride > window is
    rejected because it would drop source positions entirely.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride > window:
        raise ValueError(f"stride {stride} > window {window} would skip source rows")
    windows, valid = ops.window_rows(x, stride=stride, width=window)
    return WindowBatch(windows=windows, valid=valid, source_len=x.shape[0],
                       stride=stride, window=window)


def window_validity(seq_mask: np.ndarray | None, h: int, window: int, stride: int) -> np.ndarray:
    """(k, W) bool: window slot is a real, in-range sequence position."""
    k = window_count(h, stride)
    idx = np.arange(k)[:, None] * stride + np.arange(window)[None, :]
    valid = idx < h
    if seq_mask is not None:
        seq_mask = np.asarray(seq_mask, dtype=bool)
        if seq_mask.shape != (h,):
            raise ValueError(f"seq_mask has shape {seq_mask.shape}, want ({h},)")
        valid = valid & seq_mask[np.where(valid, idx, 0)]
    return valid


def sw_mha(
    x: Tensor,
    p: MhaParams,
    window: int,
    stride: int,
    seq_mask: np.ndarray | None = None,
    pe: str = "none",
) -> Tensor:
    """Intra-window multi-head attention with flattened window outputs.

    Projects q/k/v from the full sequence, splits each into windows, and
    attends within every window independently (real positions only,
    via valid-and-seq_mask key masking). Each window's W x eta result
    goes through the output projection and is flattened to one row, so
    an (H, eta) input becomes (ceil(H/stride), W*eta). Fully padded
    query rows are zeroed before the flatten.
    """
    if x.ndim != 2 or x.shape[1] != p.eta:
        raise ValueError(f"sw_mha: input {x.shape} vs eta {p.eta}")
    h = x.shape[0]
    n, d = p.n_heads, p.head_dim
    eta = p.eta
    x = _maybe_add_pe(x, pe)
    q, k, v = _project(x, p)
    qw = sw_split(q, window, stride)
    kw = sw_split(k, window, stride)
    vw = sw_split(v, window, stride)
    kwin = qw.k
    w = window

    keep = window_validity(seq_mask, h, window, stride)  # (k, W)

    def heads(batch: WindowBatch) -> Tensor:
        # (k, W, n*d) -> (k*n, W, d)
        t = ops.reshape(batch.windows, (kwin, w, n, d))
        return ops.reshape(ops.permute(t, (0, 2, 1, 3)), (kwin * n, w, d))

    qh, kh, vh = heads(qw), heads(kw), heads(vw)
    scores = ops.scale(ops.matmul(qh, ops.permute(kh, (0, 2, 1))), 1.0 / math.sqrt(d))
    _count_scores(kwin * n * w * w)
    # key mask per window, shared across heads and query rows; padded
    # query rows go fully masked, which is expected and silenced here
    mask = np.broadcast_to(
        np.repeat(keep, n, axis=0)[:, None, :], (kwin * n, w, w)
    )
    probs = ops.softmax_rows(scores, mask=mask, silent=True)
    out = ops.matmul(probs, vh)  # (k*n, W, d)
    out = ops.reshape(out, (kwin, n, w, d))
    out = ops.reshape(ops.permute(out, (0, 2, 1, 3)), (kwin * w, n * d))
    out = ops.matmul(out, p.wm)  # output projection per window row
    out = ops.mul_const(ops.reshape(out, (kwin, w, eta)), keep[:, :, None].astype(x.dtype))
    return ops.reshape(out, (kwin, w * eta))


def w_mha(
    x: Tensor,
    p: MhaParams,
    window_mask: np.ndarray | None = None,
    pe: str = "none",
) -> Tensor:
    """Inter-window attention: plain MHA over window rows.

    window_mask excludes rows whose source window held no real position;
    those all-padding rows attend to nothing and stay silenced.
    """
    return mha(x, p, key_mask=window_mask, pe=pe, silent_mask=True)
