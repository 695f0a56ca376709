"""Episodic sampling over a dataset of precomputed feature videos.

Seed plumbing is explicit so any single task can be regenerated on its
own. A master seed and a task index are mixed into a per-task seed with
splitmix64:

    state  = (master + (index + 1) * 0x9E3779B97F4A7C15) mod 2**64
    state ^= state >> 30;  state *= 0xBF58476D1CE4E5B9;  state mod 2**64
    state ^= state >> 27;  state *= 0x94D049BB133111EB;  state mod 2**64
    seed   = state ^ (state >> 31)

which is the standard splitmix64 output function applied to the index-th
state of a generator started at the master seed. The derived seed feeds
numpy's PCG64. Other implementations can reproduce the streams from this
description alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "ClassRecord",
    "FeatureDataset",
    "Episode",
    "splitmix64",
    "derive_seed",
    "sample_episode",
    "episode_stream",
]

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One splitmix64 output step on a 64-bit state."""
    z = state & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-task seed for task `index` under `master_seed`, regenerable alone."""
    return splitmix64((master_seed + (index + 1) * _GAMMA) & _MASK)


@dataclass
class ClassRecord:
    """One class: an id, a display name, and its feature videos.

    `video_meta` optionally carries per-video generator facts (planted
    patch positions, temporal pattern); file-loaded datasets leave it None.
    """

    class_id: int
    name: str
    videos: list[np.ndarray]
    video_meta: list[dict] | None = None
    meta: dict | None = None


@dataclass
class FeatureDataset:
    """A collection of classes whose videos all share one [L, P^2, D] shape."""

    classes: list[ClassRecord]
    provenance: str = "synthetic"
    meta: dict | None = None
    shape: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        shape = None
        seen_ids = set()
        for rec in self.classes:
            if rec.class_id in seen_ids:
                raise DataError(f"duplicate class id {rec.class_id}")
            seen_ids.add(rec.class_id)
            for v in rec.videos:
                if v.ndim != 3:
                    raise DataError(f"class {rec.class_id}: video rank {v.ndim}, expected 3")
                if shape is None:
                    shape = v.shape
                elif v.shape != shape:
                    raise DataError(
                        f"class {rec.class_id}: video shape {v.shape} differs from {shape}"
                    )
        if shape is None:
            shape = (0, 0, 0)
        self.shape = shape

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_videos(self) -> int:
        return sum(len(rec.videos) for rec in self.classes)


@dataclass
class Episode:
    """One C-way K-shot task.

    support[c][k] is the k-th support video of episode class c, queries[q]
    is a query video labeled query_labels[q] in [0, way). The *_refs lists
    hold (class_id, video_index) pairs back into the dataset. Support and
    query videos are disjoint by construction.
    """

    support: list[list[np.ndarray]]
    support_class_ids: list[int]
    support_refs: list[list[tuple[int, int]]]
    queries: list[np.ndarray]
    query_labels: list[int]
    query_refs: list[tuple[int, int]]
    way: int
    shot: int
    seed: int


def sample_episode(
    dataset: FeatureDataset,
    way: int,
    shot: int,
    n_query: int,
    seed: int,
) -> Episode:
    """Draw one episode, fully determined by `seed`.

    Classes are drawn without replacement from those holding at least
    shot + n_query videos (n_query queries could all land on one class).
    Each query picks a uniform episode class, then an unused video of it.
    """
    if way < 1 or shot < 1 or n_query < 1:
        raise DataError(f"way/shot/n_query must be positive, got {way}/{shot}/{n_query}")
    need = shot + n_query
    eligible = [rec for rec in dataset.classes if len(rec.videos) >= need]
    if len(eligible) < way:
        raise DataError(
            f"need {way} classes with at least {need} videos each, dataset has {len(eligible)}"
        )
    rng = np.random.Generator(np.random.PCG64(seed & _MASK))
    order = rng.choice(len(eligible), size=way, replace=False)
    chosen = [eligible[int(i)] for i in order]

    support: list[list[np.ndarray]] = []
    support_refs: list[list[tuple[int, int]]] = []
    used: list[set[int]] = []
    for rec in chosen:
        picks = rng.choice(len(rec.videos), size=shot, replace=False)
        support.append([rec.videos[int(i)] for i in picks])
        support_refs.append([(rec.class_id, int(i)) for i in picks])
        used.append({int(i) for i in picks})

    queries: list[np.ndarray] = []
    query_labels: list[int] = []
    query_refs: list[tuple[int, int]] = []
    labels = rng.integers(0, way, size=n_query)
    for q in range(n_query):
        ci = int(labels[q])
        rec = chosen[ci]
        pool = [i for i in range(len(rec.videos)) if i not in used[ci]]
        pick = pool[int(rng.integers(0, len(pool)))]
        used[ci].add(pick)
        queries.append(rec.videos[pick])
        query_labels.append(ci)
        query_refs.append((rec.class_id, pick))

    return Episode(
        support=support,
        support_class_ids=[rec.class_id for rec in chosen],
        support_refs=support_refs,
        queries=queries,
        query_labels=query_labels,
        query_refs=query_refs,
        way=way,
        shot=shot,
        seed=int(seed),
    )


def episode_stream(
    dataset: FeatureDataset,
    way: int,
    shot: int,
    n_query: int,
    master_seed: int,
    n_tasks: int,
):
    """Yield n_tasks episodes; task t uses derive_seed(master_seed, t)."""
    for t in range(n_tasks):
        yield sample_episode(dataset, way, shot, n_query, derive_seed(master_seed, t))
