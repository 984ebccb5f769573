"""Dual-channel variational autoencoder that turns behaviors into tokens.

Each behavior arrives as two 768-dim embeddings (text and image). A
per-channel encoder maps its embedding to (mu, logvar); the shared
latent is the concatenation z = [z_text, z_image] with each half
reparameterized as z_c = mu_c + exp(0.5 logvar_c) * eps_c. Both
decoders read the full shared z. Channel losses are reconstruction MSE
plus the closed-form KL against a standard normal prior, averaged over
the real behaviors of a sequence.

Tokenizing a standard sequence yields an (l+1) x 2D matrix: row 0 is an
all-zero CLS slot reserved for the classifier readout, rows 1..l carry
the per-behavior latents, and padded behaviors stay all-zero so the
mask can eliminate them downstream. The tokenizer only ever runs the
networks on real rows; padding never contaminates batch-norm statistics
or losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .data import StandardSequence
from .ops import BatchNormState
from .tensor import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

_MODES = ("train", "eval")


def _check_mode(mode: str) -> bool:
    if mode not in _MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def _param(rng: np.random.Generator, shape, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


@dataclass
class ChannelEncoderParams:
    """768 -> hidden -> hidden, each linear followed by BN, ReLU, dropout;
    then separate linear heads for mu and logvar."""

    w1: Tensor
    b1: Tensor
    g1: Tensor
    beta1: Tensor
    bn1: BatchNormState
    w2: Tensor
    b2: Tensor
    g2: Tensor
    beta2: Tensor
    bn2: BatchNormState
    w_mu: Tensor
    b_mu: Tensor
    w_logvar: Tensor
    b_logvar: Tensor
    dropout: float = 0.2

    @classmethod
    def create(cls, d: int, hidden: int, embed_dim: int, rng, dtype) -> "ChannelEncoderParams":
        return cls(
            w1=_param(rng, (embed_dim, hidden), dtype),
            b1=_zeros(hidden, dtype),
            g1=_ones(hidden, dtype),
            beta1=_zeros(hidden, dtype),
            bn1=BatchNormState.create(hidden, dtype),
            w2=_param(rng, (hidden, hidden), dtype),
            b2=_zeros(hidden, dtype),
            g2=_ones(hidden, dtype),
            beta2=_zeros(hidden, dtype),
            bn2=BatchNormState.create(hidden, dtype),
            w_mu=_param(rng, (hidden, d), dtype),
            b_mu=_zeros(d, dtype),
            w_logvar=_param(rng, (hidden, d), dtype),
            # Start near-deterministic (sigma ~ 0.05) so early training is not
            # drowned by unit-variance latent noise before mu carries signal.
            b_logvar=Tensor(np.full(d, -6.0, dtype=dtype), requires_grad=True),
        )

    @property
    def d(self) -> int:
        return self.w_mu.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        keys = ("w1", "b1", "g1", "beta1", "w2", "b2", "g2", "beta2",
                "w_mu", "b_mu", "w_logvar", "b_logvar")
        return {f"{prefix}.{k}": getattr(self, k) for k in keys}

    def bn_states(self, prefix: str) -> dict[str, BatchNormState]:
        return {f"{prefix}.bn1": self.bn1, f"{prefix}.bn2": self.bn2}


@dataclass
class ChannelDecoderParams:
    """2D -> hidden -> 768, ReLU between layers, linear output."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, d: int, hidden: int, embed_dim: int, rng, dtype) -> "ChannelDecoderParams":
        return cls(
            w1=_param(rng, (2 * d, hidden), dtype),
            b1=_zeros(hidden, dtype),
            w2=_param(rng, (hidden, embed_dim), dtype),
            b2=_zeros(embed_dim, dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


@dataclass
class MvaeParams:
    text_enc: ChannelEncoderParams
    image_enc: ChannelEncoderParams
    text_dec: ChannelDecoderParams
    image_dec: ChannelDecoderParams

    @classmethod
    def create(cls, d: int, rng, hidden: int = 256, embed_dim: int = 768,
               dtype=np.float32) -> "MvaeParams":
        return cls(
            text_enc=ChannelEncoderParams.create(d, hidden, embed_dim, rng, dtype),
            image_enc=ChannelEncoderParams.create(d, hidden, embed_dim, rng, dtype),
            text_dec=ChannelDecoderParams.create(d, hidden, embed_dim, rng, dtype),
            image_dec=ChannelDecoderParams.create(d, hidden, embed_dim, rng, dtype),
        )

    @property
    def d(self) -> int:
        return self.text_enc.d

    def named(self, prefix: str = "mvae") -> dict[str, Tensor]:
        out = {}
        out.update(self.text_enc.named(f"{prefix}.text_enc"))
        out.update(self.image_enc.named(f"{prefix}.image_enc"))
        out.update(self.text_dec.named(f"{prefix}.text_dec"))
        out.update(self.image_dec.named(f"{prefix}.image_dec"))
        return out

    def bn_states(self, prefix: str = "mvae") -> dict[str, BatchNormState]:
        out = {}
        out.update(self.text_enc.bn_states(f"{prefix}.text_enc"))
        out.update(self.image_enc.bn_states(f"{prefix}.image_enc"))
        return out


@dataclass
class LatentSample:
    """Reparameterization witnesses; arrays are (..., D)."""

    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray


@dataclass
class MvaeLosses:
    l_text: Tensor
    l_image: Tensor


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, w), b)


def encode_batch(
    x: Tensor, p: ChannelEncoderParams, mode: str, rng: np.random.Generator | None
) -> tuple[Tensor, Tensor]:
    """Encode (n, embed_dim) rows to ((n, D) mu, (n, D) logvar).

    Batch-norm uses batch statistics only when training with n >= 2;
    a single-row training batch falls back to the running statistics,
    since batch statistics are undefined there.
    """
    train = _check_mode(mode)
    bn_train = train and x.shape[0] >= 2
    h = _linear(x, p.w1, p.b1)
    h = ops.batch_norm(h, p.g1, p.beta1, p.bn1, train=bn_train)
    h = ops.dropout(ops.relu(h), p.dropout, rng, train=train)
    h = _linear(h, p.w2, p.b2)
    h = ops.batch_norm(h, p.g2, p.beta2, p.bn2, train=bn_train)
    h = ops.dropout(ops.relu(h), p.dropout, rng, train=train)
    mu = _linear(h, p.w_mu, p.b_mu)
    logvar = ops.clamp(_linear(h, p.w_logvar, p.b_logvar), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def encode_channel(
    x, p: ChannelEncoderParams, mode: str = "eval", rng: np.random.Generator | None = None
) -> tuple[Tensor, Tensor]:
    """Single-vector convenience wrapper around :func:`encode_batch`."""
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=p.w1.dtype)
    mu, logvar = encode_batch(ops.reshape(x, (1, x.shape[-1])), p, mode, rng)
    return ops.reshape(mu, (p.d,)), ops.reshape(logvar, (p.d,))


def reparameterize(mu: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    """z = mu + exp(0.5 logvar) * eps; eps is a constant, no grad flows to it."""
    eps = np.asarray(eps, dtype=mu.dtype)
    if eps.shape != mu.shape or logvar.shape != mu.shape:
        raise ValueError(f"reparameterize: shapes {mu.shape}/{logvar.shape}/{eps.shape}")
    sigma = ops.exp(ops.scale(logvar, 0.5))
    return ops.add(mu, ops.mul_const(sigma, eps))


def kl_term(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)), summed over entries."""
    inner = ops.add(ops.mul(mu, mu), ops.exp(logvar))
    inner = ops.add(inner, ops.add_const(ops.neg(logvar), -1.0))
    return ops.scale(ops.sum_all(inner), 0.5)


def decode_batch(z: Tensor, p: ChannelDecoderParams) -> Tensor:
    return _linear(ops.relu(_linear(z, p.w1, p.b1)), p.w2, p.b2)


def decode_channel(z, p: ChannelDecoderParams) -> Tensor:
    """Single-vector convenience wrapper around :func:`decode_batch`."""
    z = z if isinstance(z, Tensor) else Tensor(z, dtype=p.w1.dtype)
    if z.shape != (p.w1.shape[0],):
        raise ValueError(f"decode_channel: z has shape {z.shape}, want ({p.w1.shape[0]},)")
    out = decode_batch(ops.reshape(z, (1, z.shape[0])), p)
    return ops.reshape(out, (out.shape[1],))


def _forward_batch(
    text: Tensor,
    image: Tensor,
    params: MvaeParams,
    mode: str,
    rng: np.random.Generator | None,
) -> tuple[Tensor, MvaeLosses, LatentSample, LatentSample]:
    """Shared core: (n, embed_dim) per channel in, (n, 2D) latents out.

    Training draws fresh eps per behavior; eval pins eps = 0 so the
    token stream is a deterministic function of the inputs.
    """
    train = _check_mode(mode)
    n, d = text.shape[0], params.d
    mu_t, lv_t = encode_batch(text, params.text_enc, mode, rng)
    mu_i, lv_i = encode_batch(image, params.image_enc, mode, rng)
    dtype = params.text_enc.w1.data.dtype
    if train:
        if rng is None:
            raise ValueError("training mode needs an rng for the latent noise")
        # cast up front so the stored sample replays bit-exactly
        eps_t = rng.standard_normal((n, d)).astype(dtype)
        eps_i = rng.standard_normal((n, d)).astype(dtype)
    else:
        eps_t = np.zeros((n, d), dtype=dtype)
        eps_i = np.zeros((n, d), dtype=dtype)
    z_t = reparameterize(mu_t, lv_t, eps_t)
    z_i = reparameterize(mu_i, lv_i, eps_i)
    z = ops.concat([z_t, z_i], axis=1)

    recon_t = decode_batch(z, params.text_dec)
    recon_i = decode_batch(z, params.image_dec)
    diff_t = ops.sub(recon_t, text)
    diff_i = ops.sub(recon_i, image)
    # Per-behavior ELBO: squared error summed over embedding dims (Gaussian
    # log-likelihood up to scale) plus KL summed over latent dims, averaged
    # over the n behaviors. Averaging the recon term over dims instead would
    # overweight the KL ~embed_dim-fold and collapse the posterior.
    l_text = ops.scale(ops.add(ops.sum_all(ops.mul(diff_t, diff_t)), kl_term(mu_t, lv_t)), 1.0 / n)
    l_image = ops.scale(ops.add(ops.sum_all(ops.mul(diff_i, diff_i)), kl_term(mu_i, lv_i)), 1.0 / n)

    sample_t = LatentSample(mu_t.numpy(), lv_t.numpy(), eps_t, z_t.numpy())
    sample_i = LatentSample(mu_i.numpy(), lv_i.numpy(), eps_i, z_i.numpy())
    return z, MvaeLosses(l_text, l_image), sample_t, sample_i


def mvae_forward(
    x, params: MvaeParams, mode: str = "eval", rng: np.random.Generator | None = None
) -> tuple[Tensor, MvaeLosses]:
    """Run one behavior through both channels; returns (z of length 2D, losses)."""
    text = Tensor(np.asarray(x.t_vec)[None, :], dtype=params.text_enc.w1.dtype)
    image = Tensor(np.asarray(x.i_vec)[None, :], dtype=params.text_enc.w1.dtype)
    z, losses, _, _ = _forward_batch(text, image, params, mode, rng)
    return ops.reshape(z, (2 * params.d,)), losses


@dataclass
class TokenizeResult:
    s1: Tensor  # (l+1, 2D); row 0 is the all-zero CLS slot
    mask1: np.ndarray  # (l+1,) bool; CLS row is always true
    losses: MvaeLosses
    text_sample: LatentSample
    image_sample: LatentSample


def tokenize_sequence(
    seq: StandardSequence,
    params: MvaeParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> TokenizeResult:
    """Turn an l x 2 x 768 standard sequence into (l+1) x 2D tokens.

    Only real (mask=true) behaviors pass through the networks; their
    latents scatter back to rows 1..l while padded rows and the CLS row
    stay exactly zero. Losses average over the real behaviors.
    """
    l = seq.s.shape[0]
    real = np.flatnonzero(seq.mask)
    if real.size == 0:
        raise ValueError("sequence has no real behaviors to tokenize")
    dtype = params.text_enc.w1.dtype
    text = Tensor(seq.s[real, 0, :], dtype=dtype)
    image = Tensor(seq.s[real, 1, :], dtype=dtype)
    z, losses, sample_t, sample_i = _forward_batch(text, image, params, mode, rng)
    s1 = ops.embed_rows(z, real + 1, total=l + 1)
    mask1 = np.concatenate([[True], seq.mask])
    return TokenizeResult(s1=s1, mask1=mask1, losses=losses,
                          text_sample=sample_t, image_sample=sample_i)
