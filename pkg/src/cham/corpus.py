"""Synthetic frame-aligned corpora: generation, file format, batching.

Utterances stand in for real filterbank features plus a frame-level
state alignment. Each frame's feature vector is drawn from a Gaussian
whose mean is fixed per label, and labels change in contiguous segments
with geometrically distributed lengths, mimicking HMM state occupancy.
Everything is reproducible from (spec, seed) alone.

On-disk format (little endian): magic ``CHAM1``, u32 utterance count,
u32 label count, then per utterance: u32 id length, id bytes, u32 T,
u32 F, float32 features (T*F row-major), int32 alignment (T). Features
are stored as float32 and widened to float64 in memory; generation
quantizes through float32 so the round trip is bit exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng


class CorpusFormatError(ValueError):
    """Corpus file is missing, truncated, or not in the expected format."""


@dataclass
class CorpusSpec:
    num_utterances: int = 50
    min_len: int = 40
    max_len: int = 200
    num_labels: int = 9001
    feature_dim: int = 40
    noise_scale: float = 0.1
    mean_scale: float = 1.0
    segment_mean_len: float = 5.0
    seed: int = 0

    def validate(self):
        if self.min_len < 1 or self.min_len > self.max_len:
            raise ValueError(f"bad length range ({self.min_len}, {self.max_len})")
        if self.num_labels < 2:
            raise ValueError(f"need at least 2 labels, got {self.num_labels}")
        if self.num_utterances < 0:
            raise ValueError("negative utterance count")
        if self.segment_mean_len < 1.0:
            raise ValueError("segment_mean_len must be >= 1")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, F] float64
    alignment: np.ndarray  # [T] int64

    def __post_init__(self):
        if len(self.alignment) != self.features.shape[0]:
            raise ValueError(
                f"utterance {self.id}: {self.features.shape[0]} frames but "
                f"{len(self.alignment)} alignment entries"
            )
        if self.features.shape[0] < 1:
            raise ValueError(f"utterance {self.id}: empty")

    @property
    def num_frames(self):
        return self.features.shape[0]

    def equals(self, other) -> bool:
        return (
            self.id == other.id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.alignment, other.alignment)
        )


@dataclass
class Corpus:
    num_labels: int
    utterances: list = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    @property
    def total_frames(self):
        return sum(u.num_frames for u in self.utterances)

    def equals(self, other) -> bool:
        return (
            self.num_labels == other.num_labels
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.utterances, other.utterances))
        )


def generate(spec: CorpusSpec) -> Corpus:
    """Draw a corpus from the spec; same spec -> bit-identical corpus."""
    spec.validate()
    means = rng.stream(spec.seed, "means").normal(
        0.0, spec.mean_scale, size=(spec.num_labels, spec.feature_dim)
    )
    utterances = []
    p_next = 1.0 / spec.segment_mean_len
    for i in range(spec.num_utterances):
        gen = rng.stream(spec.seed, "utt", i)
        t = int(gen.integers(spec.min_len, spec.max_len + 1))
        labels = np.empty(t, dtype=np.int64)
        pos = 0
        while pos < t:
            label = int(gen.integers(spec.num_labels))
            seg = int(gen.geometric(p_next))
            labels[pos:pos + seg] = label
            pos += seg
        feats = means[labels] + spec.noise_scale * gen.normal(size=(t, spec.feature_dim))
        # quantize through the on-disk precision so save/load round-trips
        feats = feats.astype(np.float32).astype(np.float64)
        utterances.append(Utterance(id=f"utt{i:06d}", features=feats, alignment=labels))
    return Corpus(num_labels=spec.num_labels, utterances=utterances)


_MAGIC = b"CHAM1"


def save_corpus(corpus: Corpus, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", len(corpus.utterances), corpus.num_labels))
        for u in corpus.utterances:
            ident = u.id.encode("utf-8")
            t, feat_dim = u.features.shape
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<II", t, feat_dim))
            f.write(u.features.astype("<f4").tobytes())
            f.write(u.alignment.astype("<i4").tobytes())


def load_corpus(path) -> Corpus:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CorpusFormatError(f"{path}: bad magic, not a corpus file")
    off = len(_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CorpusFormatError(f"{path}: truncated")
        chunk = raw[off:off + n]
        off += n
        return chunk

    count, num_labels = struct.unpack("<II", take(8))
    utterances = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        ident = take(id_len).decode("utf-8")
        t, feat_dim = struct.unpack("<II", take(8))
        feats = np.frombuffer(take(4 * t * feat_dim), dtype="<f4")
        feats = feats.reshape(t, feat_dim).astype(np.float64)
        align = np.frombuffer(take(4 * t), dtype="<i4").astype(np.int64)
        utterances.append(Utterance(id=ident, features=feats, alignment=align))
    if off != len(raw):
        raise CorpusFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Corpus(num_labels=num_labels, utterances=utterances)


def split_dev(corpus: Corpus, fraction: float, seed) -> tuple:
    """Deterministically hold out a dev set; (train, dev).

    A single-utterance corpus evaluates on itself rather than losing its
    only training example.
    """
    n = len(corpus.utterances)
    if n <= 1 or fraction <= 0:
        return corpus, Corpus(corpus.num_labels, list(corpus.utterances))
    n_dev = min(n - 1, max(1, round(fraction * n)))
    perm = rng.stream(seed, "devsplit").permutation(n)
    dev_idx = set(int(i) for i in perm[:n_dev])
    train = [u for i, u in enumerate(corpus.utterances) if i not in dev_idx]
    dev = [u for i, u in enumerate(corpus.utterances) if i in dev_idx]
    return Corpus(corpus.num_labels, train), Corpus(corpus.num_labels, dev)


@dataclass
class Batch:
    """A frame-budgeted group of utterances, padded to a common length."""

    utterances: list
    padded_features: np.ndarray  # [B, Tmax, F] float64, zeros at padding
    padded_alignment: np.ndarray  # [B, Tmax] int64, zeros at padding
    frame_mask: np.ndarray  # [B, Tmax] bool, True at real frames

    @property
    def num_valid_frames(self):
        return int(self.frame_mask.sum())


def _pad_batch(utts) -> Batch:
    b = len(utts)
    t_max = max(u.num_frames for u in utts)
    feat_dim = utts[0].features.shape[1]
    feats = np.zeros((b, t_max, feat_dim))
    align = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=bool)
    for i, u in enumerate(utts):
        n = u.num_frames
        feats[i, :n] = u.features
        align[i, :n] = u.alignment
        mask[i, :n] = True
    return Batch(list(utts), feats, align, mask)


# Within a bucket, lengths stay within this fraction of the longest member.
_BUCKET_RATIO = 0.8


def make_batches(corpus: Corpus, frame_budget: int, seed) -> list:
    """Group utterances into batches whose padded size fits the budget.

    Utterances are sorted by length (descending), cut into buckets of
    similar length (each at least ``_BUCKET_RATIO`` of its bucket's
    longest member), shuffled within their bucket, then packed greedily:
    a batch closes when admitting the next utterance would push the
    padded frame count B * Tmax past the budget. The padded count is
    what the budget limits, because memory scales with the padded
    tensor, not the real frames.
    """
    if not corpus.utterances:
        return []
    too_long = [u for u in corpus.utterances if u.num_frames > frame_budget]
    if too_long:
        raise ValueError(
            f"utterance {too_long[0].id} has {too_long[0].num_frames} frames, "
            f"over the batch budget of {frame_budget}"
        )
    order = sorted(corpus.utterances, key=lambda u: (-u.num_frames, u.id))
    gen = rng.stream(seed, "batch-shuffle") if isinstance(seed, int) else np.random.default_rng(seed)

    buckets = []
    current = [order[0]]
    for u in order[1:]:
        if u.num_frames < _BUCKET_RATIO * current[0].num_frames:
            buckets.append(current)
            current = [u]
        else:
            current.append(u)
    buckets.append(current)

    shuffled = []
    for bucket in buckets:
        idx = gen.permutation(len(bucket))
        shuffled.extend(bucket[i] for i in idx)

    batches = []
    pending = []
    t_max = 0
    for u in shuffled:
        new_max = max(t_max, u.num_frames)
        if pending and (len(pending) + 1) * new_max > frame_budget:
            batches.append(_pad_batch(pending))
            pending = [u]
            t_max = u.num_frames
        else:
            pending.append(u)
            t_max = new_max
    if pending:
        batches.append(_pad_batch(pending))
    return batches
