"""Training loop, evaluation metrics, timing, and model checkpoints.

The loop is plain Adam on the composite loss: classification
cross-entropy plus the weighted tokenizer reconstruction terms,

    total = psi1 * L_cls + psi2 * L_image + psi3 * L_text,      psi1 = 1.

Each user is a separate graph; a minibatch accumulates per-user grads
(scaled to a mean) and takes one optimizer step, so peak memory stays at
a single forward pass regardless of batch size. Early stopping watches
validation accuracy and the returned model always carries the weights of
the best validation epoch observed.

Checkpoints use a sectioned binary format: magic "MSDC", a version word,
the model config as canonical JSON, then a table of named tensors (the
parameters followed by the batch-norm running statistics).
"""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import reset_score_count, score_count
from .blocks import Model, ModelConfig, assemble_model, model_forward
from .data import DatasetSplit, HashEmbedder, StandardSequence, UserRecord, standardize_sequence
from .optim import AdamState, adam_step, clip_global_norm, collect_grads
from .seeding import derived_rng
from .tensor import Tape, Tensor, backward, read_msdt_stream, write_msdt_stream, zero_grads

HISTORY_FIELDS = ("epoch", "train_loss", "l_cls", "l_text", "l_image", "train_acc", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 60
    patience: int = 5  # epochs without a validation-accuracy improvement
    batch_size: int = 4
    psi: tuple[float, float, float] = (1.0, 0.3, 0.4)
    clip_norm: float | None = 1.0  # None disables gradient clipping
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.psi[0] != 1.0:
            raise ValueError(f"psi[0] is fixed at 1, got {self.psi[0]}")
        if any(p < 0 for p in self.psi):
            raise ValueError(f"psi components must be >= 0, got {self.psi}")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def total_loss(l_cls: Tensor, l_image: Tensor, l_text: Tensor,
               psi: tuple[float, float, float]) -> Tensor:
    """psi-weighted sum of the classification and reconstruction losses."""
    if any(p < 0 for p in psi):
        raise ValueError(f"psi components must be >= 0, got {psi}")
    out = ops.scale(l_cls, psi[0])
    out = ops.add(out, ops.scale(l_image, psi[1]))
    return ops.add(out, ops.scale(l_text, psi[2]))


# -- evaluation ---------------------------------------------------------------------


def _model_dtype(model: Model) -> np.dtype:
    return next(iter(model.named().values())).data.dtype


@dataclass
class MetricsReport:
    """Accuracy plus per-class precision/recall/F1 from confusion counts.

    Spammer (label 1) is the positive class of the confusion matrix. A
    zero denominator reports the affected metric as 0.0 and raises the
    ``degenerate`` flag instead of dividing.
    """

    accuracy: float
    per_class: dict  # {"normal"/"spammer": {"precision","recall","f1"}}
    confusion: dict  # {"tp","fp","fn","tn"} w.r.t. the spammer class
    n: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "n": self.n,
            "degenerate": self.degenerate,
        }

    def format_table(self) -> str:
        lines = [f"accuracy {self.accuracy:.4f}  (n={self.n})",
                 f"{'class':<10}{'precision':>10}{'recall':>10}{'f1':>10}"]
        for cls in ("normal", "spammer"):
            m = self.per_class[cls]
            lines.append(f"{cls:<10}{m['precision']:>10.4f}{m['recall']:>10.4f}{m['f1']:>10.4f}")
        if self.degenerate:
            lines.append("warning: degenerate predictor, some denominators were zero")
        return "\n".join(lines)


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def metrics_from_confusion(tp: int, fp: int, fn: int, tn: int) -> MetricsReport:
    n = tp + fp + fn + tn
    if n == 0:
        raise ValueError("empty confusion matrix")
    degenerate = False
    per_class = {}
    # (predicted-positive count, actual-positive count, true-positive count)
    for cls, (hit, pred, actual) in (
        ("spammer", (tp, tp + fp, tp + fn)),
        ("normal", (tn, tn + fn, tn + fp)),
    ):
        p, d1 = _safe_div(hit, pred)
        r, d2 = _safe_div(hit, actual)
        f1, d3 = _safe_div(2.0 * p * r, p + r)
        degenerate |= d1 or d2 or d3
        per_class[cls] = {"precision": p, "recall": r, "f1": f1}
    return MetricsReport(
        accuracy=(tp + tn) / n,
        per_class=per_class,
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        n=n,
        degenerate=degenerate,
    )


def _predict(model: Model, seq: StandardSequence) -> int:
    res = model_forward(model, seq, mode="eval")
    return int(np.argmax(res.probs.data))


def _evaluate_sequences(model: Model, seqs: list[StandardSequence]) -> MetricsReport:
    tp = fp = fn = tn = 0
    for seq in seqs:
        pred = _predict(model, seq)
        if seq.label == 1:
            tp += pred == 1
            fn += pred == 0
        else:
            fp += pred == 1
            tn += pred == 0
    return metrics_from_confusion(tp, fp, fn, tn)


def evaluate(model: Model, records: list[UserRecord], l: int | None = None,
             provider=None) -> MetricsReport:
    """Argmax predictions over *records*, summarized as a MetricsReport."""
    if not records:
        raise ValueError("evaluate: no records")
    l = model.config.l if l is None else l
    provider = provider or HashEmbedder()
    seqs = [standardize_sequence(u, l, provider, dtype=_model_dtype(model)) for u in records]
    return _evaluate_sequences(model, seqs)


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean and std of every headline metric across repeated runs."""
    if not reports:
        raise ValueError("aggregate_reports: no reports")

    def ms(values):
        a = np.asarray(values, dtype=np.float64)
        return {"mean": float(a.mean()), "std": float(a.std())}

    out = {"runs": len(reports), "accuracy": ms([r.accuracy for r in reports])}
    for cls in ("normal", "spammer"):
        out[cls] = {
            k: ms([r.per_class[cls][k] for r in reports]) for k in ("precision", "recall", "f1")
        }
    return out


# -- training loop ------------------------------------------------------------------


def _snapshot(model: Model) -> dict:
    params = {k: t.data.copy() for k, t in model.named().items()}
    bn = {k: (s.running_mean.copy(), s.running_var.copy())
          for k, s in model.bn_states().items()}
    return {"params": params, "bn": bn}


def _restore(model: Model, snap: dict) -> None:
    for k, t in model.named().items():
        t.data[...] = snap["params"][k]
    for k, s in model.bn_states().items():
        mean, var = snap["bn"][k]
        s.running_mean[...] = mean
        s.running_var[...] = var


def _user_losses(model: Model, seq: StandardSequence, psi, rng):
    """Train-mode forward; returns (total, l_cls, l_image, l_text, pred)."""
    res = model_forward(model, seq, mode="train", rng=rng)
    probs = ops.reshape(res.probs, (1, 2))
    l_cls = ops.cross_entropy(probs, np.array([seq.label]))
    total = total_loss(l_cls, res.mvae_losses.l_image, res.mvae_losses.l_text, psi)
    return total, l_cls, res.mvae_losses.l_image, res.mvae_losses.l_text, int(np.argmax(res.probs.data))


def train_loop(
    model: Model,
    split: DatasetSplit,
    cfg: TrainConfig,
    provider=None,
) -> tuple[Model, list[dict]]:
    """Adam on the composite loss with early stopping on validation accuracy.

    Returns the model (mutated in place, holding the best-validation
    weights) and the per-epoch history: epoch, train_loss, l_cls,
    l_text, l_image, train_acc, val_acc. Deterministic for a fixed
    (model, split, cfg.seed).
    """
    if not split.train or not split.validation:
        raise ValueError("train_loop: train and validation splits must be non-empty")
    provider = provider or HashEmbedder()
    dtype = cfg.dtype
    l = model.config.l
    train_seqs = [standardize_sequence(u, l, provider, dtype=dtype) for u in split.train]
    val_seqs = [standardize_sequence(u, l, provider, dtype=dtype) for u in split.validation]

    params = model.named()
    opt = AdamState(lr=cfg.lr)
    history: list[dict] = []
    best = _snapshot(model)
    best_acc = -1.0
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = derived_rng(cfg.seed, "shuffle", str(epoch)).permutation(len(train_seqs))
        noise = derived_rng(cfg.seed, "noise", str(epoch))
        sums = {"total": 0.0, "l_cls": 0.0, "l_image": 0.0, "l_text": 0.0}
        correct = 0

        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc_grads = {k: np.zeros_like(p.data) for k, p in params.items()}
            inv = 1.0 / len(batch)
            for idx in batch:
                seq = train_seqs[idx]
                zero_grads(params.values())
                with Tape():
                    total, l_cls, l_image, l_text, pred = _user_losses(model, seq, cfg.psi, noise)
                    share = ops.scale(total, inv)
                backward(share, params=list(params.values()))
                for k, p in params.items():
                    acc_grads[k] += p.grad
                sums["total"] += total.item()
                sums["l_cls"] += l_cls.item()
                sums["l_image"] += l_image.item()
                sums["l_text"] += l_text.item()
                correct += pred == seq.label
            if cfg.clip_norm is not None:
                clip_global_norm(acc_grads, cfg.clip_norm)
            adam_step(params, acc_grads, opt)

        n = len(train_seqs)
        val_acc = _evaluate_sequences(model, val_seqs).accuracy
        history.append({
            "epoch": epoch,
            "train_loss": sums["total"] / n,
            "l_cls": sums["l_cls"] / n,
            "l_text": sums["l_text"] / n,
            "l_image": sums["l_image"] / n,
            "train_acc": correct / n,
            "val_acc": val_acc,
        })
        # snapshot on ties so a plateau keeps the most-trained weights, but
        # only a strict improvement resets the patience counter
        if val_acc >= best_acc:
            best = _snapshot(model)
        if val_acc > best_acc:
            best_acc = val_acc
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    _restore(model, best)
    return model, history


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        w.writerows({k: row[k] for k in HISTORY_FIELDS} for row in history)


def write_history_json(path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(history, f, indent=2)
        f.write("\n")


# -- timing -------------------------------------------------------------------------


@dataclass
class SpuReport:
    """Median eval seconds per user, with size context."""

    spu_seconds: float
    users: int
    repeats: int
    param_count: int
    score_storage_per_user: int
    runs: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "spu_seconds": self.spu_seconds,
            "users": self.users,
            "repeats": self.repeats,
            "param_count": self.param_count,
            "score_storage_per_user": self.score_storage_per_user,
            "runs": self.runs,
        }


def measure_spu(model: Model, records: list[UserRecord], l: int | None = None,
                repeats: int = 3, provider=None, min_users: int = 50) -> SpuReport:
    """Wall-clock eval time per user, median over *repeats* timed passes.

    Short record lists are tiled up to *min_users* so one pass is long
    enough to time. Embedding happens once, outside the clock; the score
    counter is read per pass and reported per user.
    """
    if not records:
        raise ValueError("measure_spu: no records")
    if repeats < 1:
        raise ValueError("measure_spu: repeats must be >= 1")
    l = model.config.l if l is None else l
    provider = provider or HashEmbedder()
    seqs = [standardize_sequence(u, l, provider, dtype=_model_dtype(model)) for u in records]
    while len(seqs) < min_users:
        seqs.append(seqs[len(seqs) % len(records)])

    runs = []
    per_user_scores = 0
    for _ in range(repeats):
        reset_score_count()
        t0 = time.perf_counter()
        for seq in seqs:
            _predict(model, seq)
        dt = time.perf_counter() - t0
        runs.append(dt / len(seqs))
        per_user_scores = score_count() // len(seqs)
    return SpuReport(
        spu_seconds=float(np.median(runs)),
        users=len(seqs),
        repeats=repeats,
        param_count=model.param_count(),
        score_storage_per_user=per_user_scores,
        runs=runs,
    )


# -- checkpoints ---------------------------------------------------------------------

_MSDC_MAGIC = b"MSDC"
_MSDC_VERSION = 1
_BN_PREFIX = "bnstat."


class CheckpointError(Exception):
    """Raised on a malformed or mismatched checkpoint; names the section."""


def _named_arrays(model: Model) -> dict[str, np.ndarray]:
    out = {k: t.data for k, t in model.named().items()}
    for k, s in model.bn_states().items():
        out[f"{_BN_PREFIX}{k}.running_mean"] = s.running_mean
        out[f"{_BN_PREFIX}{k}.running_var"] = s.running_var
    return out


def save_checkpoint(path, model: Model) -> None:
    """Write config + all weights and batch-norm running stats to *path*."""
    table = _named_arrays(model)
    blob = model.config.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MSDC_MAGIC)
        f.write(struct.pack("<I", _MSDC_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(table)))
        for name in sorted(table):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            write_msdt_stream(f, table[name])


def load_checkpoint(path) -> Model:
    """Rebuild the model a checkpoint describes; every error names its section."""
    with open(path, "rb") as f:
        if f.read(4) != _MSDC_MAGIC:
            raise CheckpointError(f"{path}: magic: not a checkpoint file")
        raw = f.read(4)
        if len(raw) < 4:
            raise CheckpointError(f"{path}: version: truncated")
        (version,) = struct.unpack("<I", raw)
        if version != _MSDC_VERSION:
            raise CheckpointError(f"{path}: version: unsupported version {version}")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        blob = f.read(blob_len)
        if len(blob) < blob_len:
            raise CheckpointError(f"{path}: config: truncated")
        try:
            cfg = ModelConfig.from_json(blob.decode("utf-8"))
        except (ValueError, KeyError, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: config: {e}") from None
        (count,) = struct.unpack("<I", f.read(4))
        table: dict[str, np.ndarray] = {}
        for _ in range(count):
            try:
                (name_len,) = struct.unpack("<H", f.read(2))
                name = f.read(name_len).decode("utf-8")
                table[name] = read_msdt_stream(f)
            except (struct.error, ValueError, UnicodeDecodeError) as e:
                raise CheckpointError(f"{path}: tensors: {e}") from None
        if f.read(1):
            raise CheckpointError(f"{path}: tensors: trailing bytes")

    dtype = None
    for name, arr in table.items():
        if not name.startswith(_BN_PREFIX):
            dtype = arr.dtype
            break
    if dtype is None:
        raise CheckpointError(f"{path}: tensors: no parameter tensors")
    model = assemble_model(cfg, seed=0, dtype=dtype)
    want = _named_arrays(model)
    missing = sorted(set(want) - set(table))
    extra = sorted(set(table) - set(want))
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensors: name mismatch (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, t in model.named().items():
        arr = table[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensors: {name}: shape {arr.shape} vs expected {t.data.shape}"
            )
        t.data = arr.astype(dtype, copy=False)
    for k, s in model.bn_states().items():
        for stat in ("running_mean", "running_var"):
            arr = table[f"{_BN_PREFIX}{k}.{stat}"]
            target = getattr(s, stat)
            if arr.shape != target.shape:
                raise CheckpointError(
                    f"{path}: tensors: {_BN_PREFIX}{k}.{stat}: shape {arr.shape} vs {target.shape}"
                )
            target[...] = arr
    return model
