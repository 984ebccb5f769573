"""Hierarchical split-window attention for ultra-long behavior sequences.

The pipeline: a dual-channel variational autoencoder turns each (text,
image) behavior pair into one latent token, two windowed attention
stages shrink the token sequence while widening its features, and a
small head classifies the user from the final classification row.
"""

from .attention import (
    MhaParams,
    PeConfig,
    mha,
    positional_encoding,
    reset_score_count,
    score_count,
    sw_mha,
    w_mha,
)
from .blocks import (
    Model,
    ModelConfig,
    StageConfig,
    StageTrace,
    VARIANTS,
    assemble_model,
    model_forward,
    planned_trace,
)
from .data import (
    CachedEmbeddings,
    DatasetSplit,
    HashEmbedder,
    StandardSequence,
    UserRecord,
    load_dataset,
    save_dataset,
    split_dataset,
    standardize_sequence,
    synth_generate,
    write_embedding_cache,
)
from .gradcheck import check_gradients, relative_error
from .mvae import MvaeParams, TokenizeResult, mvae_forward, tokenize_sequence
from .optim import AdamState, adam_step, clip_global_norm, collect_grads
from .seeding import counter_rng, derive_seed, derived_rng
from .tensor import Tape, Tensor, backward, read_msdt, write_msdt, zero_grads
from .training import (
    CheckpointError,
    MetricsReport,
    SpuReport,
    TrainConfig,
    aggregate_reports,
    evaluate,
    load_checkpoint,
    measure_spu,
    save_checkpoint,
    train_loop,
    write_history_csv,
    write_history_json,
)

__all__ = [
    "AdamState",
    "CachedEmbeddings",
    "CheckpointError",
    "DatasetSplit",
    "HashEmbedder",
    "MetricsReport",
    "MhaParams",
    "Model",
    "ModelConfig",
    "MvaeParams",
    "PeConfig",
    "SpuReport",
    "StageConfig",
    "StageTrace",
    "StandardSequence",
    "Tape",
    "Tensor",
    "TokenizeResult",
    "TrainConfig",
    "UserRecord",
    "VARIANTS",
    "adam_step",
    "aggregate_reports",
    "assemble_model",
    "backward",
    "check_gradients",
    "clip_global_norm",
    "collect_grads",
    "counter_rng",
    "derive_seed",
    "derived_rng",
    "evaluate",
    "load_checkpoint",
    "load_dataset",
    "measure_spu",
    "mha",
    "model_forward",
    "mvae_forward",
    "planned_trace",
    "positional_encoding",
    "relative_error",
    "reset_score_count",
    "save_checkpoint",
    "save_dataset",
    "score_count",
    "split_dataset",
    "standardize_sequence",
    "sw_mha",
    "synth_generate",
    "tokenize_sequence",
    "train_loop",
    "w_mha",
    "write_embedding_cache",
    "write_history_csv",
    "write_history_json",
    "write_msdt",
    "read_msdt",
    "zero_grads",
]

__version__ = "0.1.0"
