"""Class-embedding banks, feature datasets, and their binary persistence.

Two little-endian container formats:

EZB (embedding bank)
    magic "EZB1" | u32 class count C | u32 dim d | u8 has_optimized |
    C x (u16 name length, UTF-8 name) | C*d f64 initial rows |
    if has_optimized: C*d f64 optimized rows

EZF (feature dataset)
    magic "EZF1" | u32 N | u32 d_v | u32 d_a |
    N x (u16 name length, UTF-8 class name, u8 partition tag,
         d_v f64 visual, d_a f64 audio)

Partition tags: 0=train, 1=val, 2=test.  Save/load round trips are
byte-identical; loaders validate every invariant before returning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .validation import check_matrix

__all__ = [
    "StoreError",
    "EmbeddingBank",
    "ClassSplit",
    "FeatureDataset",
    "PARTITION_NAMES",
    "load_embedding_bank",
    "save_embedding_bank",
    "load_feature_dataset",
    "save_feature_dataset",
]

PARTITION_NAMES = ("train", "val", "test")
TRAIN, VAL, TEST = 0, 1, 2

_EZB_MAGIC = b"EZB1"
_EZF_MAGIC = b"EZF1"

# rows already unit within this are stored as-is; up to _NORM_REJECT they are
# re-normalized on load; anything worse is rejected
_NORM_KEEP = 1e-9
_NORM_REJECT = 1e-6


class StoreError(ValueError):
    """Raised for malformed files and invariant violations."""


def _normalize_loaded_rows(rows, what):
    norms = np.linalg.norm(rows, axis=1)
    dev = np.abs(norms - 1.0)
    if np.any(dev > _NORM_REJECT):
        bad = int(np.argmax(dev))
        raise StoreError(
            f"non-unit embedding: {what} row {bad} has norm {norms[bad]:.6g}"
        )
    fix = dev > _NORM_KEEP
    if np.any(fix):
        rows = rows.copy()
        rows[fix] /= norms[fix, None]
    return rows


@dataclass(frozen=True)
class EmbeddingBank:
    """Named class embeddings: the initial rows and, optionally, the
    optimized ones.  Rows are unit-norm; class names are unique and class
    index is file order."""

    class_names: tuple
    initial: np.ndarray
    optimized: np.ndarray | None = None

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(set(names)) != len(names):
            raise StoreError("duplicate class name in bank")
        init = check_matrix(self.initial, "initial", rows=len(names))
        _check_unit(init, "initial")
        object.__setattr__(self, "initial", init)
        if self.optimized is not None:
            opt = check_matrix(
                self.optimized, "optimized", rows=init.shape[0], cols=init.shape[1]
            )
            _check_unit(opt, "optimized")
            object.__setattr__(self, "optimized", opt)

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def dim(self):
        return self.initial.shape[1]

    def index_of(self, name):
        try:
            return self.class_names.index(name)
        except ValueError:
            raise StoreError(f"unknown class name: {name!r}") from None

    def with_optimized(self, optimized):
        return EmbeddingBank(self.class_names, self.initial, optimized)


def _check_unit(rows, what):
    dev = np.abs(np.linalg.norm(rows, axis=1) - 1.0)
    if rows.shape[0] and float(dev.max()) > _NORM_KEEP:
        bad = int(np.argmax(dev))
        raise StoreError(f"non-unit embedding: {what} row {bad}")


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint seen/unseen class index sets covering the label space."""

    seen: frozenset
    unseen: frozenset

    def __post_init__(self):
        seen = frozenset(int(i) for i in self.seen)
        unseen = frozenset(int(i) for i in self.unseen)
        if not seen or not unseen:
            raise StoreError("seen and unseen class sets must both be non-empty")
        if seen & unseen:
            raise StoreError("seen and unseen class sets overlap")
        object.__setattr__(self, "seen", seen)
        object.__setattr__(self, "unseen", unseen)

    def covers(self, n_classes):
        return self.seen | self.unseen == set(range(n_classes))

    @classmethod
    def from_dataset(cls, labels, partition, n_classes):
        """Split derived from a dataset: seen = classes with train samples."""
        labels = np.asarray(labels)
        partition = np.asarray(partition)
        seen = frozenset(int(c) for c in np.unique(labels[partition == TRAIN]))
        unseen = frozenset(range(n_classes)) - seen
        return cls(seen=seen, unseen=unseen)


@dataclass(frozen=True)
class FeatureDataset:
    """Per-sample (visual, audio, label, partition) records."""

    visual: np.ndarray
    audio: np.ndarray
    labels: np.ndarray
    partition: np.ndarray
    class_names: tuple = field(default=())

    def __post_init__(self):
        vis = check_matrix(self.visual, "visual")
        aud = check_matrix(self.audio, "audio", rows=vis.shape[0])
        labels = np.asarray(self.labels, dtype=np.int64)
        part = np.asarray(self.partition, dtype=np.int64)
        if vis.shape[0] < 1:
            raise StoreError("dataset must contain at least one sample")
        if labels.shape != (vis.shape[0],) or part.shape != (vis.shape[0],):
            raise StoreError("labels/partition length must match sample count")
        if np.any(labels < 0):
            raise StoreError("negative class label")
        if np.any((part < 0) | (part > 2)):
            raise StoreError("partition tag outside {0,1,2}")
        object.__setattr__(self, "visual", vis)
        object.__setattr__(self, "audio", aud)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_samples(self):
        return self.visual.shape[0]

    def rows(self, part):
        """Boolean mask for one partition tag."""
        return self.partition == part


# ---------------------------------------------------------------------------
# EZB
# ---------------------------------------------------------------------------

def save_embedding_bank(bank, path):
    """Write an EZB file; identical banks produce identical bytes."""
    chunks = [_EZB_MAGIC]
    has_opt = bank.optimized is not None
    chunks.append(struct.pack("<IIB", bank.n_classes, bank.dim, int(has_opt)))
    for name in bank.class_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise StoreError(f"class name too long: {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
    chunks.append(np.ascontiguousarray(bank.initial, dtype="<f8").tobytes())
    if has_opt:
        chunks.append(np.ascontiguousarray(bank.optimized, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise StoreError(f"truncated file ({self.path}): expected {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count, what):
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def done(self):
        if self.pos != len(self.data):
            raise StoreError(f"trailing bytes in {self.path}")


def load_embedding_bank(path):
    """Read and validate an EZB file."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4, "magic") != _EZB_MAGIC:
        raise StoreError(f"bad magic in {path}: not an EZB file")
    n_classes, dim, has_opt = r.unpack("<IIB", "header")
    if n_classes < 1 or dim < 1:
        raise StoreError("EZB header: class count and dim must be >= 1")
    if has_opt not in (0, 1):
        raise StoreError("EZB header: has_optimized flag must be 0 or 1")
    names = []
    for i in range(n_classes):
        (ln,) = r.unpack("<H", f"name length {i}")
        names.append(r.take(ln, f"name {i}").decode("utf-8"))
    if len(set(names)) != n_classes:
        raise StoreError("duplicate class name in EZB file")
    initial = r.floats(n_classes * dim, "initial rows").reshape(n_classes, dim)
    if not np.all(np.isfinite(initial)):
        raise StoreError("non-finite value in initial embeddings")
    initial = _normalize_loaded_rows(initial, "initial")
    optimized = None
    if has_opt:
        optimized = r.floats(n_classes * dim, "optimized rows").reshape(n_classes, dim)
        if not np.all(np.isfinite(optimized)):
            raise StoreError("non-finite value in optimized embeddings")
        optimized = _normalize_loaded_rows(optimized, "optimized")
    r.done()
    return EmbeddingBank(tuple(names), initial, optimized)


# ---------------------------------------------------------------------------
# EZF
# ---------------------------------------------------------------------------

def save_feature_dataset(dataset, path):
    """Write an EZF file using the dataset's class-name strings."""
    if not dataset.class_names:
        raise StoreError("dataset has no class names to serialize")
    chunks = [_EZF_MAGIC]
    d_v = dataset.visual.shape[1]
    d_a = dataset.audio.shape[1]
    chunks.append(struct.pack("<III", dataset.n_samples, d_v, d_a))
    for i in range(dataset.n_samples):
        name = dataset.class_names[int(dataset.labels[i])]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", int(dataset.partition[i])))
        chunks.append(np.ascontiguousarray(dataset.visual[i], dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(dataset.audio[i], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_feature_dataset(path, bank, split=None, expect_dims=None):
    """Read an EZF file, resolving class names against ``bank``.

    When ``split`` is given, train-partition samples must belong to seen
    classes.  Passing split=None skips that check (it is re-derived by
    callers that only need the data).  ``expect_dims=(d_v, d_a)`` pins the
    feature widths.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4, "magic") != _EZF_MAGIC:
        raise StoreError(f"bad magic in {path}: not an EZF file")
    n, d_v, d_a = r.unpack("<III", "header")
    if n < 1 or d_v < 1 or d_a < 1:
        raise StoreError("EZF header: N, d_v, d_a must all be >= 1")
    if expect_dims is not None and (d_v, d_a) != tuple(expect_dims):
        raise StoreError(
            f"feature dim mismatch: file has (d_v={d_v}, d_a={d_a}), "
            f"expected (d_v={expect_dims[0]}, d_a={expect_dims[1]})"
        )
    visual = np.empty((n, d_v))
    audio = np.empty((n, d_a))
    labels = np.empty(n, dtype=np.int64)
    partition = np.empty(n, dtype=np.int64)
    for i in range(n):
        (ln,) = r.unpack("<H", f"record {i} name length")
        name = r.take(ln, f"record {i} name").decode("utf-8")
        (tag,) = r.unpack("<B", f"record {i} partition")
        if tag > 2:
            raise StoreError(f"record {i}: partition tag {tag} outside {{0,1,2}}")
        labels[i] = bank.index_of(name)
        partition[i] = tag
        visual[i] = r.floats(d_v, f"record {i} visual")
        audio[i] = r.floats(d_a, f"record {i} audio")
    r.done()
    if not (np.all(np.isfinite(visual)) and np.all(np.isfinite(audio))):
        raise StoreError("non-finite feature value in EZF file")
    if split is not None:
        train_labels = labels[partition == TRAIN]
        bad = [int(c) for c in np.unique(train_labels) if int(c) not in split.seen]
        if bad:
            raise StoreError(
                "unseen class in train partition: "
                + ", ".join(bank.class_names[c] for c in bad)
            )
    return FeatureDataset(
        visual=visual,
        audio=audio,
        labels=labels,
        partition=partition,
        class_names=bank.class_names,
    )
