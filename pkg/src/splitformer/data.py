"""Behavior data model, ingestion, standardization, and synthetic corpora.

A user is an ordered list of behaviors, each a text byte string plus an
optional image byte string. Real deployments would run pre-trained text
and image encoders; here the pluggable provider interface is filled by a
content-addressed hash embedder that maps any byte string to a fixed
768-dim unit-RMS vector, preserving exactly the property the model
relies on: identical content embeds identically, different content
embeds (almost surely) very differently.

Standardization turns a user into a fixed-shape l x 2 x 768 sequence:
over-long histories keep the most recent l behaviors, short ones are
padded at the tail with all-zero rows flagged by the mask.
"""

from __future__ import annotations

import base64
import binascii
import json
import struct
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .seeding import counter_rng, derive_seed, hash_bytes

EMBED_DIM = 768
LABEL_NAMES = {0: "normal", 1: "spammer"}
LABEL_IDS = {v: k for k, v in LABEL_NAMES.items()}


@dataclass(frozen=True)
class Behavior:
    """One user action: text bytes, optional image bytes, optional timestamp."""

    text: bytes
    image: bytes | None = None
    timestamp: int | None = None

    def __post_init__(self):
        if not self.text and self.image is None:
            raise ValueError("behavior needs text or an image")


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    label: int
    behaviors: tuple[Behavior, ...]

    def __post_init__(self):
        if self.label not in LABEL_NAMES:
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if len(self.behaviors) < 1:
            raise ValueError(f"user {self.user_id!r} has no behaviors")


@dataclass
class EmbeddedBehavior:
    t_vec: np.ndarray
    i_vec: np.ndarray
    is_padding: bool = False


@dataclass
class StandardSequence:
    """Fixed-shape model input: s is l x 2 x embed_dim, mask flags real rows.

    The pipeline always produces embed_dim = 768; the container only
    enforces the two-channel structure so that scaled-down widths stay
    usable in finite-difference harnesses.
    """

    s: np.ndarray
    mask: np.ndarray
    label: int
    user_id: str = ""

    def __post_init__(self):
        if self.s.ndim != 3 or self.s.shape[1] != 2 or self.mask.shape != (self.s.shape[0],):
            raise ValueError(f"bad standard sequence shapes {self.s.shape} / {self.mask.shape}")


# -- embedding providers -----------------------------------------------------


def hash_embed(data: bytes, dtype=np.float64) -> np.ndarray:
    """Map bytes to a deterministic 768-dim vector with unit RMS.

    A 64-bit content hash seeds a counter-based generator; 768 standard
    normals are drawn and rescaled to RMS 1. Any change to the input
    reseeds the whole stream, so distinct contents land nearly
    orthogonal with overwhelming probability.
    """
    rng = counter_rng(hash_bytes(data))
    v = rng.standard_normal(EMBED_DIM)
    v *= 1.0 / np.sqrt(np.mean(v * v))
    return v.astype(dtype)


class EmbeddingProvider(Protocol):
    def embed_text(self, data: bytes) -> np.ndarray: ...

    def embed_image(self, data: bytes) -> np.ndarray: ...


class HashEmbedder:
    """Default provider: hash_embed on both channels."""

    def embed_text(self, data: bytes) -> np.ndarray:
        return hash_embed(data)

    def embed_image(self, data: bytes) -> np.ndarray:
        return hash_embed(data)


def embed_behavior(b: Behavior, provider: EmbeddingProvider) -> EmbeddedBehavior:
    """Embed one behavior; a missing image becomes the all-zero vector."""
    t_vec = np.asarray(provider.embed_text(b.text), dtype=np.float64)
    if b.image is None:
        i_vec = np.zeros(EMBED_DIM)
    else:
        i_vec = np.asarray(provider.embed_image(b.image), dtype=np.float64)
    if t_vec.shape != (EMBED_DIM,) or i_vec.shape != (EMBED_DIM,):
        raise ValueError(f"provider returned shapes {t_vec.shape}/{i_vec.shape}, want ({EMBED_DIM},)")
    return EmbeddedBehavior(t_vec, i_vec)


def embed_user(u: UserRecord, provider) -> np.ndarray:
    """Embed all behaviors of one user into an (len, 2, 768) array.

    Providers with per-user lookup (the cache) are used directly;
    content-addressed providers embed behavior by behavior, and a
    provider failure is re-raised with the behavior's index attached.
    """
    if hasattr(provider, "user_matrix"):
        return provider.user_matrix(u)
    out = np.empty((len(u.behaviors), 2, EMBED_DIM))
    for i, b in enumerate(u.behaviors):
        try:
            eb = embed_behavior(b, provider)
        except Exception as e:
            raise RuntimeError(f"embedding failed for user {u.user_id!r} behavior {i}: {e}") from e
        out[i, 0] = eb.t_vec
        out[i, 1] = eb.i_vec
    return out


def standardize_sequence(u: UserRecord, l: int, provider, dtype=np.float32) -> StandardSequence:
    """Fix a user's history to exactly l rows: recent-l truncation, tail padding."""
    if l < 1:
        raise ValueError(f"sequence length must be >= 1, got {l}")
    emb = embed_user(u, provider)
    n = emb.shape[0]
    s = np.zeros((l, 2, EMBED_DIM), dtype=dtype)
    mask = np.zeros(l, dtype=bool)
    keep = min(n, l)
    s[:keep] = emb[n - keep:]  # most recent behaviors win on overflow
    mask[:keep] = True
    return StandardSequence(s=s, mask=mask, label=u.label, user_id=u.user_id)


# -- dataset files (JSON lines) ----------------------------------------------


def _parse_user(obj: dict, where: str) -> UserRecord:
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: expected an object, got {type(obj).__name__}")
    try:
        user_id = obj["user_id"]
        label_name = obj["label"]
        raw_behaviors = obj["behaviors"]
    except KeyError as e:
        raise ValueError(f"{where}: missing key {e.args[0]!r}") from None
    if not isinstance(user_id, str):
        raise ValueError(f"{where}: user_id must be a string")
    if label_name not in LABEL_IDS:
        raise ValueError(f"{where}: unknown label {label_name!r} (want 'normal' or 'spammer')")
    if not isinstance(raw_behaviors, list) or not raw_behaviors:
        raise ValueError(f"{where}: behaviors must be a non-empty list")
    behaviors = []
    for i, rb in enumerate(raw_behaviors):
        if not isinstance(rb, dict) or "text" not in rb:
            raise ValueError(f"{where}: behavior {i} must be an object with a 'text' key")
        image_b64 = rb.get("image_b64")
        image = None
        if image_b64 is not None:
            try:
                image = base64.b64decode(image_b64, validate=True)
            except (binascii.Error, ValueError):
                raise ValueError(f"{where}: behavior {i} has invalid base64 image data") from None
        ts = rb.get("ts")
        if ts is not None and not isinstance(ts, int):
            raise ValueError(f"{where}: behavior {i} timestamp must be an integer")
        try:
            behaviors.append(Behavior(text=rb["text"].encode(), image=image, timestamp=ts))
        except (ValueError, AttributeError) as e:
            raise ValueError(f"{where}: behavior {i}: {e}") from None
    if all(b.timestamp is not None for b in behaviors):
        behaviors.sort(key=lambda b: b.timestamp)
    try:
        return UserRecord(user_id=user_id, label=LABEL_IDS[label_name], behaviors=tuple(behaviors))
    except ValueError as e:
        raise ValueError(f"{where}: {e}") from None


def load_dataset(path) -> list[UserRecord]:
    """Read a JSON-lines user file; every error names its line number."""
    users = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{where}: invalid JSON ({e.msg})") from None
            users.append(_parse_user(obj, where))
    return users


def save_dataset(path, users: list[UserRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in users:
            obj = {
                "user_id": u.user_id,
                "label": LABEL_NAMES[u.label],
                "behaviors": [
                    {
                        "text": b.text.decode(),
                        "image_b64": base64.b64encode(b.image).decode() if b.image is not None else None,
                        "ts": b.timestamp,
                    }
                    for b in u.behaviors
                ],
            }
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


# -- synthetic corpus --------------------------------------------------------

_POOL_SIZE = 48


def _spam_pool(seed: int) -> list[tuple[bytes, bytes]]:
    """Shared canonical spam content: (text, image) pairs reused across spammers."""
    rng = counter_rng(derive_seed(seed, "spam-pool"))
    pool = []
    for j in range(_POOL_SIZE):
        tag = rng.integers(0, 2**32)
        text = f"hot deal {j}: claim your bonus now ref={tag:08x}".encode()
        image = f"promo-banner-{j}-{tag:08x}".encode()
        pool.append((text, image))
    return pool


def synth_generate(n_users: int, l_mean: int = 48, seed: int = 0) -> list[UserRecord]:
    """Generate a balanced labeled corpus with spammer-specific structure.

    Spammers emit bursty runs of near-duplicate content drawn from a
    pool shared across all spammers, and periodically re-post their own
    early "template" behavior over the whole history. Normal users post
    unique content at a relaxed pace. Sequence lengths are log-normal
    around l_mean for both classes, so length alone carries no label
    signal. Pure function of (n_users, l_mean, seed).
    """
    if n_users < 2:
        raise ValueError(f"need at least 2 users, got {n_users}")
    pool = _spam_pool(seed)
    users = []
    for uid in range(n_users):
        label = uid % 2  # alternate: counts differ by at most 1
        rng = counter_rng(derive_seed(seed, "user", uid))
        length = max(4, int(round(rng.lognormal(np.log(l_mean), 0.45))))
        behaviors: list[Behavior] = []
        ts = int(rng.integers(1_500_000_000, 1_600_000_000))

        if label == 1:
            template_text, template_image = pool[int(rng.integers(len(pool)))]
            while len(behaviors) < length:
                roll = rng.random()
                if roll < 0.15:
                    # long-range template reuse
                    behaviors.append(Behavior(template_text, template_image, ts))
                    ts += int(rng.integers(30, 600))
                elif roll < 0.75:
                    # bursty run of near-duplicates of one pool message
                    text, image = pool[int(rng.integers(len(pool)))]
                    for r in range(int(rng.integers(2, 6))):
                        if len(behaviors) >= length:
                            break
                        t = text if rng.random() < 0.7 else text + f" #{r}".encode()
                        behaviors.append(Behavior(t, image, ts))
                        ts += int(rng.integers(1, 8))  # seconds apart
                    ts += int(rng.integers(60, 900))
                else:
                    filler = f"u{uid} filler {rng.integers(0, 2**48):012x}".encode()
                    behaviors.append(Behavior(filler, None, ts))
                    ts += int(rng.integers(60, 3600))
        else:
            for i in range(length):
                text = f"u{uid} daily note {i} {rng.integers(0, 2**48):012x}".encode()
                image = None
                if rng.random() < 0.25:
                    image = f"u{uid}-photo-{i}-{rng.integers(0, 2**32):08x}".encode()
                behaviors.append(Behavior(text, image, ts))
                ts += int(rng.integers(300, 14400))

        users.append(UserRecord(user_id=f"u{uid:05d}", label=label, behaviors=tuple(behaviors)))
    return users


# -- splitting ---------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[UserRecord]
    validation: list[UserRecord]
    test: list[UserRecord]
    ratios: tuple[float, float, float]
    seed: int


def _largest_remainder(n: int, ratios: tuple[float, ...]) -> list[int]:
    quotas = [n * r for r in ratios]
    sizes = [int(q) for q in quotas]
    remainders = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in range(n - sum(sizes)):
        sizes[remainders[i]] += 1
    return sizes


def split_dataset(
    records: list[UserRecord],
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Seeded stratified split into train/validation/test.

    Each label group is shuffled independently, the groups are merged by
    proportional interleave so labels stay evenly spread, and the merged
    list is cut contiguously at largest-remainder sizes. Deterministic
    in (records order, ratios, seed).
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    n = len(records)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")

    groups: dict[int, list[UserRecord]] = {}
    for r in records:
        groups.setdefault(r.label, []).append(r)
    for label, group in sorted(groups.items()):
        counter_rng(derive_seed(seed, "split", label)).shuffle(group)

    # proportional interleave: always take from the most under-served label
    merged: list[UserRecord] = []
    taken = {label: 0 for label in groups}
    while len(merged) < n:
        deficit = {
            label: len(groups[label]) * (len(merged) + 1) / n - taken[label]
            for label in groups
            if taken[label] < len(groups[label])
        }
        pick = max(sorted(deficit), key=lambda lb: deficit[lb])
        merged.append(groups[pick][taken[pick]])
        taken[pick] += 1

    s_train, s_val, s_test = _largest_remainder(n, ratios)
    return DatasetSplit(
        train=merged[:s_train],
        validation=merged[s_train:s_train + s_val],
        test=merged[s_train + s_val:],
        ratios=ratios,
        seed=seed,
    )


# -- embedding cache ---------------------------------------------------------
#
#   data file:  magic "MSDE", u32 LE behavior count, then per behavior
#               768 float32 LE (text) + 768 float32 LE (image)
#   index file: <data>.idx, JSON {"users": {user_id: [byte offset, ...]}}
# ---------------------------------------------------------------------------

_MSDE_MAGIC = b"MSDE"
_BLOCK = EMBED_DIM * 4


def write_embedding_cache(path, users: list[UserRecord], provider: EmbeddingProvider) -> None:
    """Embed every behavior of every user and store the vectors on disk."""
    path = str(path)
    index: dict[str, list[int]] = {}
    count = 0
    with open(path, "wb") as f:
        f.write(_MSDE_MAGIC)
        f.write(struct.pack("<I", 0))  # patched after the scan
        for u in users:
            if u.user_id in index:
                raise ValueError(f"duplicate user_id {u.user_id!r} in cache input")
            offsets = []
            for i, b in enumerate(u.behaviors):
                try:
                    eb = embed_behavior(b, provider)
                except Exception as e:
                    raise RuntimeError(f"embedding failed for user {u.user_id!r} behavior {i}: {e}") from e
                offsets.append(f.tell())
                f.write(eb.t_vec.astype("<f4").tobytes())
                f.write(eb.i_vec.astype("<f4").tobytes())
                count += 1
            index[u.user_id] = offsets
        f.seek(4)
        f.write(struct.pack("<I", count))
    with open(path + ".idx", "w", encoding="utf-8") as f:
        json.dump({"users": index}, f)


class CachedEmbeddings:
    """Read-side of the embedding cache; keyed by (user_id, behavior index)."""

    def __init__(self, path):
        path = str(path)
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MSDE_MAGIC:
                raise ValueError(f"{path}: bad cache magic {magic!r}")
            (self.count,) = struct.unpack("<I", f.read(4))
            self._blob = f.read()
        expect = self.count * 2 * _BLOCK
        if len(self._blob) != expect:
            raise ValueError(f"{path}: payload is {len(self._blob)} bytes, want {expect}")
        with open(path + ".idx", encoding="utf-8") as f:
            self._index: dict[str, list[int]] = json.load(f)["users"]

    def lookup(self, user_id: str, behavior_idx: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            offset = self._index[user_id][behavior_idx]
        except (KeyError, IndexError):
            raise KeyError(f"no cached embedding for user {user_id!r} behavior {behavior_idx}") from None
        start = offset - 8  # offsets are absolute file positions
        t = np.frombuffer(self._blob, dtype="<f4", count=EMBED_DIM, offset=start)
        i = np.frombuffer(self._blob, dtype="<f4", count=EMBED_DIM, offset=start + _BLOCK)
        return t.astype(np.float64), i.astype(np.float64)

    def user_matrix(self, u: UserRecord) -> np.ndarray:
        if u.user_id not in self._index:
            raise KeyError(f"user {u.user_id!r} not in embedding cache")
        stored = len(self._index[u.user_id])
        if stored != len(u.behaviors):
            raise ValueError(
                f"cache holds {stored} behaviors for user {u.user_id!r}, record has {len(u.behaviors)}"
            )
        out = np.empty((stored, 2, EMBED_DIM))
        for i in range(stored):
            t, im = self.lookup(u.user_id, i)
            out[i, 0] = t
            out[i, 1] = im
        return out
