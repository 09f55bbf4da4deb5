"""Synthetic live / physical-fake / digital-fake images and their binary file format.

Geometry: every fake image sits at ``live + shift +/- spread`` where ``shift``
is shared by both attack types and ``spread`` pushes physical and digital
attacks apart.  With ``gap = g`` the distance between the two attack
centroids is ``g`` times the distance from the live centroid to the pooled
fake centroid, so large ``g`` makes the fake class sparse (wide intra-class
spread) while the live class stays compact.  At the default ``g = 2`` the
physical attack carries only the blocky texture and the digital attack only
the checkerboard.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import rng

DATASET_MAGIC = b"UADS0001"
EMBEDDING_MAGIC = b"UAEM0001"
SPLITS = ("train", "eval", "test")
SUBTYPES = ("live", "phys", "digital")
LIVE, FAKE = 1, 0


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    seed: int = 0
    subjects_train: int = 20
    subjects_eval: int = 5
    subjects_test: int = 5
    # live and attack are balanced overall (live = phys + digital)
    per_subject_live: int = 12
    per_subject_phys: int = 6
    per_subject_digital: int = 6
    image_size: int = 32
    channels: int = 3
    noise_sigma: float = 0.05
    gap: float = 2.0
    attack_strength: float = 0.02
    subject_sigma: float = 0.08
    block_size: int = 4

    def __post_init__(self):
        counts = (
            self.subjects_train,
            self.subjects_eval,
            self.subjects_test,
            self.per_subject_live,
            self.per_subject_phys,
            self.per_subject_digital,
        )
        if min(counts) < 1:
            raise ValueError("all subject and per-subject counts must be > 0")
        if self.noise_sigma < 0 or self.gap < 0 or self.attack_strength < 0 or self.subject_sigma < 0:
            raise ValueError("noise_sigma, gap, attack_strength and subject_sigma must be >= 0")
        if self.image_size % self.block_size:
            raise ValueError("image_size must be a multiple of block_size")

    def subjects(self, split: str) -> int:
        return getattr(self, f"subjects_{split}")

    def per_subject(self, subtype: str) -> int:
        return getattr(self, f"per_subject_{subtype}")

    def replace(self, **changes) -> "SyntheticDatasetSpec":
        return SyntheticDatasetSpec(**{**asdict(self), **changes})


@dataclass
class Split:
    """Samples of one split, stored column-wise.  ``images`` is float32 (N, H, W, C)."""

    images: np.ndarray
    labels: np.ndarray
    subtypes: np.ndarray
    subject_ids: np.ndarray
    name: str = field(default="")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Split":
        return Split(self.images[idx], self.labels[idx], self.subtypes[idx], self.subject_ids[idx], self.name)

    def sample(self, i: int) -> dict:
        return {
            "image": self.images[i],
            "label": int(self.labels[i]),
            "subtype": SUBTYPES[self.subtypes[i]],
            "subject_id": int(self.subject_ids[i]),
        }

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.subtypes == k)) for k, name in enumerate(SUBTYPES)}

    def equals(self, other: "Split") -> bool:
        return (
            self.images.dtype == other.images.dtype
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.subtypes, other.subtypes)
            and np.array_equal(self.subject_ids, other.subject_ids)
        )


# ---------------------------------------------------------------------------
# Base patterns
# ---------------------------------------------------------------------------


def live_pattern(size: int, channels: int) -> np.ndarray:
    """Smooth radial gradient, brighter in the centre, slightly tinted per channel."""
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r2 = ((x - c) ** 2 + (y - c) ** 2) / (c * c * 2.0)
    base = 0.3 + 0.4 * (1.0 - r2)
    tint = 1.0 - 0.08 * np.arange(channels)
    return base[:, :, None] * tint[None, None, :]


def blocky_texture(size: int, channels: int, block: int) -> np.ndarray:
    """Zero-mean +/-1 texture constant on block x block tiles (print / moire proxy)."""
    gen = rng(0x5EED, "blocky")
    g = size // block
    # half the tiles negative so the texture has exactly zero mean
    flat = np.ones(g * g)
    flat[gen.permutation(g * g)[: g * g // 2]] = -1.0
    tiles = flat.reshape(g, g)
    tex = np.kron(tiles, np.ones((block, block)))
    return np.repeat(tex[:, :, None], channels, axis=2)


def checker_texture(size: int, channels: int) -> np.ndarray:
    """Zero-mean +/-1 one-pixel checkerboard (generation-artifact proxy)."""
    y, x = np.mgrid[0:size, 0:size]
    tex = np.where((x + y) % 2 == 0, 1.0, -1.0)
    return np.repeat(tex[:, :, None], channels, axis=2)


def class_centers(spec: SyntheticDatasetSpec) -> dict[str, np.ndarray]:
    """Noise-free centres of the three subtypes (before subject offsets)."""
    size, ch = spec.image_size, spec.channels
    live = live_pattern(size, ch)
    b = blocky_texture(size, ch, spec.block_size)
    c = checker_texture(size, ch)
    a = spec.attack_strength
    shift = a * 0.5 * (b + c)
    spread = a * 0.5 * spec.gap * 0.5 * (b - c)
    return {"live": live, "phys": live + shift + spread, "digital": live + shift - spread}


def _subject_offset(gen: np.random.Generator, spec: SyntheticDatasetSpec) -> np.ndarray:
    # low-frequency zero-mean field: a few random cosine modes, RMS = subject_sigma
    size, ch = spec.image_size, spec.channels
    y, x = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((size, size, ch))
    for _ in range(6):
        fx, fy = gen.integers(1, 3, size=2)
        phase = gen.uniform(0, 2 * np.pi)
        amp = gen.normal(size=ch)
        wave = np.cos(2 * np.pi * (fx * x + fy * y) + phase)
        field_ += wave[:, :, None] * amp[None, None, :]
    field_ -= field_.mean()
    rms = np.sqrt(np.mean(field_**2))
    return field_ * (spec.subject_sigma / rms) if rms > 0 else field_


def generate(spec: SyntheticDatasetSpec) -> dict[str, Split]:
    """Three splits with disjoint subject ids; each subject has all three subtypes."""
    centers = class_centers(spec)
    out = {}
    next_subject = 0
    for split in SPLITS:
        images, labels, subtypes, subjects = [], [], [], []
        for _ in range(spec.subjects(split)):
            sid = next_subject
            next_subject += 1
            gen = rng(spec.seed, "subject", sid)
            offset = _subject_offset(gen, spec)
            for k, subtype in enumerate(SUBTYPES):
                for _ in range(spec.per_subject(subtype)):
                    noise = gen.normal(0.0, 1.0, size=offset.shape) * spec.noise_sigma
                    img = np.clip(centers[subtype] + offset + noise, 0.0, 1.0)
                    images.append(img.astype(np.float32))
                    labels.append(LIVE if subtype == "live" else FAKE)
                    subtypes.append(k)
                    subjects.append(sid)
        out[split] = Split(
            np.stack(images),
            np.array(labels, dtype=np.uint8),
            np.array(subtypes, dtype=np.uint8),
            np.array(subjects, dtype=np.uint32),
            split,
        )
    return out


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sIIII")
_RECORD = struct.Struct("<BBI")


def write_dataset(split: Split, path) -> None:
    n, h, w, c = split.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, n, h, w, c))
        for i in range(n):
            fh.write(_RECORD.pack(int(split.labels[i]), int(split.subtypes[i]), int(split.subject_ids[i])))
            fh.write(np.ascontiguousarray(split.images[i], dtype="<f4").tobytes())


def read_dataset(path, name: str = "") -> Split:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    magic, n, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    pixels = h * w * c
    rec = _RECORD.size + 4 * pixels
    expected = _HEADER.size + n * rec
    if len(blob) < expected:
        offset = _HEADER.size + ((len(blob) - _HEADER.size) // rec) * rec
        raise FormatError(f"{path}: truncated: header declares {n} samples, record at offset {offset} incomplete")
    if len(blob) > expected:
        raise FormatError(f"{path}: count mismatch: {len(blob) - expected} trailing bytes at offset {expected}")
    images = np.empty((n, h, w, c), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    subtypes = np.empty(n, dtype=np.uint8)
    subjects = np.empty(n, dtype=np.uint32)
    pos = _HEADER.size
    for i in range(n):
        labels[i], subtypes[i], subjects[i] = _RECORD.unpack_from(blob, pos)
        pos += _RECORD.size
        images[i] = np.frombuffer(blob, dtype="<f4", count=pixels, offset=pos).reshape(h, w, c)
        pos += 4 * pixels
    bad = (subtypes >= len(SUBTYPES)) | ((labels == LIVE) != (subtypes == 0))
    if bad.any():
        i = int(np.argmax(bad))
        raise FormatError(f"{path}: inconsistent label/subtype in record {i} at offset {_HEADER.size + i * rec}")
    return Split(images, labels, subtypes, subjects, name)


def split_path(root, split: str) -> Path:
    return Path(root) / f"{split}.uads"


def write_splits(splits: dict[str, Split], root) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        p = split_path(root, name)
        write_dataset(splits[name], p)
        paths.append(p)
    return paths


def read_splits(root) -> dict[str, Split]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    return {name: read_dataset(split_path(root, name), name) for name in SPLITS}


def write_embeddings(path, vectors: np.ndarray, split: Split) -> None:
    """Embedding dump: magic, u32 count and dim, then per row label/subtype/subject and f64 values."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", EMBEDDING_MAGIC, n, dim))
        for i in range(n):
            fh.write(_RECORD.pack(int(split.labels[i]), int(split.subtypes[i]), int(split.subject_ids[i])))
            fh.write(np.ascontiguousarray(vectors[i], dtype="<f8").tobytes())


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    magic, n, dim = struct.unpack_from("<8sII", blob, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    rec = _RECORD.size + 8 * dim
    pos = struct.calcsize("<8sII")
    if len(blob) != pos + n * rec:
        raise FormatError(f"{path}: expected {pos + n * rec} bytes, found {len(blob)}")
    vecs = np.empty((n, dim))
    labels = np.empty(n, dtype=np.uint8)
    subtypes = np.empty(n, dtype=np.uint8)
    subjects = np.empty(n, dtype=np.uint32)
    for i in range(n):
        labels[i], subtypes[i], subjects[i] = _RECORD.unpack_from(blob, pos)
        pos += _RECORD.size
        vecs[i] = np.frombuffer(blob, dtype="<f8", count=dim, offset=pos)
        pos += 8 * dim
    return vecs, labels, subtypes, subjects


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


class BatchConfigError(ValueError):
    pass


def epoch_order(split: Split, seed: int, epoch: int) -> np.ndarray:
    """Shuffled index order with live and fake samples interleaved while both remain."""
    gen = rng(seed, "batches", epoch)
    live = np.flatnonzero(split.labels == LIVE)
    fake = np.flatnonzero(split.labels == FAKE)
    live = live[gen.permutation(live.size)]
    fake = fake[gen.permutation(fake.size)]
    # alternate the starting class per epoch so neither label always leads
    first, second = (live, fake) if gen.random() < 0.5 else (fake, live)
    k = min(first.size, second.size)
    inter = np.empty(2 * k, dtype=np.int64)
    inter[0::2] = first[:k]
    inter[1::2] = second[:k]
    rest = first[k:] if first.size > k else second[k:]
    return np.concatenate([inter, rest])


def batch_indices(split: Split, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    if batch_size < 2 or batch_size % 2:
        raise BatchConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    if batch_size > len(split):
        raise BatchConfigError(f"batch_size {batch_size} exceeds split size {len(split)}")
    order = epoch_order(split, seed, epoch)
    out = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    # single-class batches left over by an imbalanced split are spread through the
    # epoch instead of always closing it
    perm = rng(seed, "batch-order", epoch).permutation(len(out))
    return [out[i] for i in perm]


def batches(split: Split, batch_size: int, seed: int, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, subtypes)``; every sample appears exactly once per epoch."""
    for idx in batch_indices(split, batch_size, seed, epoch):
        yield split.images[idx], split.labels[idx], split.subtypes[idx]
