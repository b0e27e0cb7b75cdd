"""Seeded synthetic benchmark generator.

Class text embeddings are unit vectors scattered around a small number of
super-group centroids, so unseen classes have semantically nearby seen
classes.  Visual and audio prototypes are fixed random linear images of the
text embedding, and each sample is the unit-normalized prototype plus
Gaussian noise.  The train partition holds only seen classes; val and test
hold both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import TEST, TRAIN, VAL, ClassSplit, EmbeddingBank, FeatureDataset

__all__ = ["SynthConfig", "generate_benchmark"]

# spread of class embeddings around their cluster centroid, pre-normalization
_CLUSTER_SPREAD = 0.35


@dataclass
class SynthConfig:
    n_classes: int = 18
    n_seen: int = 12
    dim_text: int = 32
    dim_visual: int = 64
    dim_audio: int = 48
    train_per_class: int = 40
    val_per_class: int = 10
    test_per_class: int = 10
    noise_sigma: float = 0.4
    semantic_clusters: int = 3
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.n_seen < self.n_classes:
            raise ValueError("n_seen must satisfy 0 < n_seen < n_classes")
        if min(self.dim_text, self.dim_visual, self.dim_audio) < 1:
            raise ValueError("all dimensions must be >= 1")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 1:
            raise ValueError("samples per class must be >= 1")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.semantic_clusters <= self.n_classes:
            raise ValueError("semantic_clusters must lie in [1, n_classes]")
        return self


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_benchmark(config):
    """Build (EmbeddingBank, ClassSplit, FeatureDataset) from one seed.

    The same config always produces bit-identical arrays, so the EZB/EZF
    files written from them are byte-identical too.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    c, d = config.n_classes, config.dim_text

    centroids = _unit(rng.standard_normal((config.semantic_clusters, d)))
    cluster_of = np.arange(c) % config.semantic_clusters
    text = _unit(centroids[cluster_of] + _CLUSTER_SPREAD * rng.standard_normal((c, d)))

    # clusters are assigned round-robin, so taking the first n_seen classes
    # as seen leaves every cluster with seen members (when n_seen >= clusters)
    split = ClassSplit(
        seen=frozenset(range(config.n_seen)),
        unseen=frozenset(range(config.n_seen, c)),
    )

    names = tuple(
        f"event_{k:02d}_g{cluster_of[k]}{'s' if k in split.seen else 'u'}"
        for k in range(c)
    )
    bank = EmbeddingBank(names, text)

    map_v = rng.standard_normal((d, config.dim_visual)) / np.sqrt(d)
    map_a = rng.standard_normal((d, config.dim_audio)) / np.sqrt(d)
    proto_v = _unit(text @ map_v)
    proto_a = _unit(text @ map_a)

    visual, audio, labels, partition = [], [], [], []
    plan = (
        (TRAIN, config.train_per_class, True),
        (VAL, config.val_per_class, False),
        (TEST, config.test_per_class, False),
    )
    for cls in range(c):
        seen_class = cls in split.seen
        for tag, count, seen_only in plan:
            if seen_only and not seen_class:
                continue
            # noise_sigma is the expected noise norm relative to the unit
            # prototype, hence the 1/sqrt(dim) per-coordinate scale
            noise_v = rng.standard_normal((count, config.dim_visual))
            noise_a = rng.standard_normal((count, config.dim_audio))
            scale_v = config.noise_sigma / np.sqrt(config.dim_visual)
            scale_a = config.noise_sigma / np.sqrt(config.dim_audio)
            visual.append(_unit(proto_v[cls] + scale_v * noise_v))
            audio.append(_unit(proto_a[cls] + scale_a * noise_a))
            labels.extend([cls] * count)
            partition.extend([tag] * count)

    dataset = FeatureDataset(
        visual=np.vstack(visual),
        audio=np.vstack(audio),
        labels=np.asarray(labels, dtype=np.int64),
        partition=np.asarray(partition, dtype=np.int64),
        class_names=names,
    )
    return bank, split, dataset
