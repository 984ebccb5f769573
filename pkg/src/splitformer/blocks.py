"""Transformer blocks and the full two-stage model.

One stage = a single SW block followed by a run of W blocks. The SW
block (no residuals; the shape change forbids them) is

    LN -> sw_mha -> LN -> sw_mlp,

taking (H, eta) to (ceil(H/stride), 2*eta): sw_mha flattens each window
to one W*eta row, and the SW-MLP squeezes that back down through 4*eta
to 2*eta. The W block is a standard pre-norm residual block over the
window rows. Two stages take the tokenizer output

    (l+1, 2D) -> (k1, 4D) -> (k2, 8D),

and the classifier head reads the CLS feature in row 0, which window 0
of every split necessarily contains.

Each stage also propagates a window mask: a window row is real when it
covered at least one real token. Dead rows are key-masked inside every
attention call and re-zeroed at the next sw_mha, so the content of
padding can never reach the CLS feature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import MhaParams, PeConfig, sw_mha, w_mha, window_count, window_validity
from .data import StandardSequence
from .head import HeadParams, head_logits
from .mvae import MvaeLosses, MvaeParams, TokenizeResult, tokenize_sequence
from .ops import BatchNormState
from .tensor import Tensor

GELU = ops.gelu


def _w(rng, shape, dtype):
    return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    """One windowed stage: window width, stride, and trailing W-block count."""

    window: int
    stride: int
    w_count: int
    eta: int  # per-token input width of this stage

    def __post_init__(self):
        if not 1 <= self.stride <= self.window:
            raise ValueError(f"need 1 <= stride <= window, got stride={self.stride} window={self.window}")
        if self.w_count < 0:
            raise ValueError("negative w_count")


VARIANTS = {
    "B": dict(d=16, windows=(64, 64), strides=(32, 4), w_counts=(3, 3)),
    "M": dict(d=16, windows=(128, 64), strides=(32, 4), w_counts=(3, 11)),
    "L": dict(d=64, windows=(128, 64), strides=(32, 4), w_counts=(7, 17)),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    d: int
    l: int
    stages: tuple[StageConfig, StageConfig]
    n_heads: int = 8
    pe: PeConfig = field(default_factory=PeConfig)
    dropout: float = 0.2
    embed_dim: int = 768
    mvae_hidden: int = 256

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("sequence length must be >= 1")
        if self.stages[0].eta != 2 * self.d or self.stages[1].eta != 4 * self.d:
            raise ValueError(
                f"stage widths must be (2D, 4D) = ({2 * self.d}, {4 * self.d}), "
                f"got ({self.stages[0].eta}, {self.stages[1].eta})"
            )
        for s in self.stages:
            if s.eta % self.n_heads:
                raise ValueError(f"stage width {s.eta} not divisible by {self.n_heads} heads")
        if self.pe.sw == "TPE" or self.pe.w == "TPE":
            raise ValueError("assembled models support pe kinds 'none' and 'APE'")

    @classmethod
    def from_variant(cls, name: str, l: int, n_heads: int = 8, pe: PeConfig | None = None,
                     dropout: float = 0.2) -> "ModelConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}, pick one of {sorted(VARIANTS)}")
        v = VARIANTS[name]
        return cls.custom(v["d"], l, v["windows"], v["strides"], v["w_counts"],
                          n_heads=n_heads, pe=pe, dropout=dropout, name=name)

    @classmethod
    def custom(cls, d: int, l: int, windows, strides, w_counts, n_heads: int = 8,
               pe: PeConfig | None = None, dropout: float = 0.2,
               embed_dim: int = 768, mvae_hidden: int = 256,
               name: str = "custom") -> "ModelConfig":
        stages = (
            StageConfig(windows[0], strides[0], w_counts[0], eta=2 * d),
            StageConfig(windows[1], strides[1], w_counts[1], eta=4 * d),
        )
        return cls(variant=name, d=d, l=l, stages=stages, n_heads=n_heads,
                   pe=pe or PeConfig(), dropout=dropout,
                   embed_dim=embed_dim, mvae_hidden=mvae_hidden)

    def to_json(self) -> str:
        obj = {
            "variant": self.variant,
            "d": self.d,
            "l": self.l,
            "windows": [s.window for s in self.stages],
            "strides": [s.stride for s in self.stages],
            "w_counts": [s.w_count for s in self.stages],
            "n_heads": self.n_heads,
            "pe": {"sw": self.pe.sw, "w": self.pe.w},
            "dropout": self.dropout,
            "embed_dim": self.embed_dim,
            "mvae_hidden": self.mvae_hidden,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        o = json.loads(text)
        return cls.custom(
            o["d"], o["l"], o["windows"], o["strides"], o["w_counts"],
            n_heads=o["n_heads"], pe=PeConfig(**o["pe"]), dropout=o["dropout"],
            embed_dim=o["embed_dim"], mvae_hidden=o["mvae_hidden"], name=o["variant"],
        )


# -- parameters -----------------------------------------------------------------


@dataclass
class SwMlpParams:
    """Window-row squeeze: W*eta -> 4*eta -> 2*eta."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float

    @classmethod
    def create(cls, window: int, eta: int, rng, dtype, dropout: float) -> "SwMlpParams":
        return cls(
            w1=_w(rng, (window * eta, 4 * eta), dtype), b1=_zeros(4 * eta, dtype),
            w2=_w(rng, (4 * eta, 2 * eta), dtype), b2=_zeros(2 * eta, dtype),
            dropout=dropout,
        )

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


@dataclass
class SwBlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: MhaParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp: SwMlpParams

    @classmethod
    def create(cls, cfg: StageConfig, n_heads: int, rng, dtype, dropout: float) -> "SwBlockParams":
        eta = cfg.eta
        return cls(
            ln1_g=_ones(eta, dtype), ln1_b=_zeros(eta, dtype),
            attn=MhaParams.create(eta, n_heads, rng, dtype),
            ln2_g=_ones(cfg.window * eta, dtype), ln2_b=_zeros(cfg.window * eta, dtype),
            mlp=SwMlpParams.create(cfg.window, eta, rng, dtype, dropout),
        )

    def named(self, prefix):
        out = {f"{prefix}.{k}": getattr(self, k) for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b")}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(self.mlp.named(f"{prefix}.mlp"))
        return out


@dataclass
class WBlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: MhaParams
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float

    @classmethod
    def create(cls, eta: int, n_heads: int, rng, dtype, dropout: float) -> "WBlockParams":
        return cls(
            ln1_g=_ones(eta, dtype), ln1_b=_zeros(eta, dtype),
            attn=MhaParams.create(eta, n_heads, rng, dtype),
            ln2_g=_ones(eta, dtype), ln2_b=_zeros(eta, dtype),
            w1=_w(rng, (eta, 2 * eta), dtype), b1=_zeros(2 * eta, dtype),
            w2=_w(rng, (2 * eta, eta), dtype), b2=_zeros(eta, dtype),
            dropout=dropout,
        )

    def named(self, prefix):
        keys = ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
        out = {f"{prefix}.{k}": getattr(self, k) for k in keys}
        out.update(self.attn.named(f"{prefix}.attn"))
        return out


@dataclass
class StageParams:
    config: StageConfig
    sw: SwBlockParams
    w_blocks: list[WBlockParams]

    @classmethod
    def create(cls, cfg: StageConfig, n_heads: int, rng, dtype, dropout: float) -> "StageParams":
        return cls(
            config=cfg,
            sw=SwBlockParams.create(cfg, n_heads, rng, dtype, dropout),
            w_blocks=[
                WBlockParams.create(2 * cfg.eta, n_heads, rng, dtype, dropout)
                for _ in range(cfg.w_count)
            ],
        )

    def named(self, prefix):
        out = self.sw.named(f"{prefix}.sw")
        for i, wb in enumerate(self.w_blocks):
            out.update(wb.named(f"{prefix}.w{i}"))
        return out


# -- blocks -----------------------------------------------------------------------


def sw_mlp(x: Tensor, p: SwMlpParams, mode: str = "eval",
           rng: np.random.Generator | None = None) -> Tensor:
    """Squeeze flattened window rows: (k, W*eta) -> (k, 2*eta)."""
    if x.ndim != 2 or x.shape[1] != p.w1.shape[0]:
        raise ValueError(f"sw_mlp: input {x.shape} vs weight {p.w1.shape}")
    h = ops.add(ops.matmul(x, p.w1), p.b1)
    h = ops.dropout(GELU(h), p.dropout, rng, train=(mode == "train"))
    return ops.add(ops.matmul(h, p.w2), p.b2)


def sw_block(
    x: Tensor,
    p: SwBlockParams,
    cfg: StageConfig,
    seq_mask: np.ndarray | None = None,
    pe: str = "none",
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray, tuple]:
    """LN -> sw_mha -> LN -> sw_mlp, no residuals (the shape changes).

    Returns the (k, 2*eta) stage rows, the propagated window mask
    (true where the window held at least one real token), and the
    (post-attention, post-mlp) shape pair for tracing.
    """
    h = ops.layer_norm(x, p.ln1_g, p.ln1_b)
    a = sw_mha(h, p.attn, cfg.window, cfg.stride, seq_mask=seq_mask, pe=pe)
    h2 = ops.layer_norm(a, p.ln2_g, p.ln2_b)
    out = sw_mlp(h2, p.mlp, mode=mode, rng=rng)
    window_mask = window_validity(seq_mask, x.shape[0], cfg.window, cfg.stride).any(axis=1)
    return out, window_mask, (a.shape, out.shape)


def w_block(
    x: Tensor,
    p: WBlockParams,
    window_mask: np.ndarray | None = None,
    pe: str = "none",
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block over window rows; shape preserved."""
    a = w_mha(ops.layer_norm(x, p.ln1_g, p.ln1_b), p.attn, window_mask=window_mask, pe=pe)
    x = ops.add(x, a)
    h = ops.add(ops.matmul(ops.layer_norm(x, p.ln2_g, p.ln2_b), p.w1), p.b1)
    h = ops.dropout(GELU(h), p.dropout, rng, train=(mode == "train"))
    h = ops.add(ops.matmul(h, p.w2), p.b2)
    return ops.add(x, h)


# -- model ------------------------------------------------------------------------


@dataclass
class Model:
    config: ModelConfig
    mvae: MvaeParams
    stages: tuple[StageParams, StageParams]
    head: HeadParams

    def named(self) -> dict[str, Tensor]:
        out = self.mvae.named("mvae")
        out.update(self.stages[0].named("stage2"))
        out.update(self.stages[1].named("stage3"))
        out.update(self.head.named("head"))
        return out

    def bn_states(self) -> dict[str, BatchNormState]:
        return self.mvae.bn_states("mvae")

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named().values())


def assemble_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Build MVAE + two windowed stages + head with seeded N(0, 0.02^2) init."""
    from .seeding import derived_rng

    mvae = MvaeParams.create(
        cfg.d, derived_rng(seed, "init", "mvae"),
        hidden=cfg.mvae_hidden, embed_dim=cfg.embed_dim, dtype=dtype,
    )
    stages = tuple(
        StageParams.create(
            sc, cfg.n_heads, derived_rng(seed, "init", f"stage{i + 2}"), dtype, cfg.dropout
        )
        for i, sc in enumerate(cfg.stages)
    )
    head = HeadParams.create(
        cfg.d, derived_rng(seed, "init", "head"), dtype=dtype, dropout=cfg.dropout
    )
    return Model(config=cfg, mvae=mvae, stages=stages, head=head)


@dataclass
class StageTrace:
    """Shapes observed (or predicted) along the pipeline."""

    token_shape: tuple[int, int]
    stage_shapes: list[dict]  # per stage: input/post_sw/post_mlp/output
    cls_width: int

    def to_dict(self) -> dict:
        return {
            "token_shape": list(self.token_shape),
            "stages": [
                {k: list(v) for k, v in s.items()} for s in self.stage_shapes
            ],
            "cls_width": self.cls_width,
        }


def planned_trace(cfg: ModelConfig) -> StageTrace:
    """Closed-form shape law: H -> ceil(H/s1) -> ceil(ceil(H/s1)/s2), widths 2D/4D/8D."""
    h = cfg.l + 1
    shapes = []
    for sc in cfg.stages:
        k = window_count(h, sc.stride)
        shapes.append({
            "input": (h, sc.eta),
            "post_sw": (k, sc.window * sc.eta),
            "post_mlp": (k, 2 * sc.eta),
            "output": (k, 2 * sc.eta),
        })
        h = k
    return StageTrace(token_shape=(cfg.l + 1, 2 * cfg.d), stage_shapes=shapes,
                      cls_width=8 * cfg.d)


@dataclass
class ForwardResult:
    logits: Tensor  # (2,)
    probs: Tensor  # (2,)
    mvae_losses: MvaeLosses
    trace: StageTrace
    tokens: TokenizeResult


def model_forward(
    model: Model,
    seq: StandardSequence,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Tokenize, run both stages, classify the CLS row."""
    cfg = model.config
    if seq.s.shape[0] != cfg.l:
        raise ValueError(f"sequence length {seq.s.shape[0]} does not match config l={cfg.l}")
    tokens = tokenize_sequence(seq, model.mvae, mode=mode, rng=rng)
    x, mask = tokens.s1, tokens.mask1

    stage_shapes = []
    for idx, stage in enumerate(model.stages):
        in_shape = x.shape
        x, mask, (post_sw, post_mlp) = sw_block(
            x, stage.sw, stage.config, seq_mask=mask, pe=cfg.pe.sw, mode=mode, rng=rng
        )
        for i, wb in enumerate(stage.w_blocks):
            pe = cfg.pe.w if i == 0 else "none"
            x = w_block(x, wb, window_mask=mask, pe=pe, mode=mode, rng=rng)
        stage_shapes.append({
            "input": in_shape, "post_sw": post_sw, "post_mlp": post_mlp, "output": x.shape,
        })

    logits = head_logits(ops.slice_rows(x, 0, 1), model.head, mode=mode, rng=rng)
    probs = ops.reshape(ops.softmax_rows(logits), (2,))
    logits = ops.reshape(logits, (2,))
    trace = StageTrace(token_shape=tokens.s1.shape, stage_shapes=stage_shapes,
                       cls_width=x.shape[1])
    return ForwardResult(logits=logits, probs=probs, mvae_losses=tokens.losses,
                         trace=trace, tokens=tokens)
