"""Synthetic patch-feature videos and the FeaturePack binary format.

The generator plants a class-specific unit-norm signature into otherwise
Gaussian patch features, so spatial alignment (where the signature sits on
the grid) and temporal structure (when its halves appear) can be controlled
independently of noise level.

FeaturePack layout (all integers little-endian unsigned 32-bit):

    offset 0   magic bytes "FPK1"
    offset 4   version (currently 1)
    offset 8   n_videos
    offset 12  frames L
    offset 16  patches per frame P^2
    offset 20  channels D
    offset 24  n_classes
    offset 28  videos, each: class_id u32 followed by L*P^2*D
               little-endian float32 values in row-major order

Total file length is therefore 28 + n_videos * (4 + 4*L*P^2*D) bytes.
Parse failures report the byte offset at which the file went wrong.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .episodes import ClassRecord, FeatureDataset
from .errors import ConfigError, PackFormatError

__all__ = [
    "SynthSpec",
    "generate_synthetic",
    "max_order_classes",
    "write_feature_pack",
    "read_feature_pack",
    "PACK_MAGIC",
    "PACK_VERSION",
]

PACK_MAGIC = b"FPK1"
PACK_VERSION = 1
_HEADER = struct.Struct("<4s6I")

_JITTER_MODES = ("none", "video", "frame")
_TEMPORAL_MODES = ("none", "order-pair")


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the synthetic generator.

    spatial_jitter controls how often the planted grid position is
    resampled: "none" fixes it per class, "video" per video, "frame" per
    frame. temporal_mode "order-pair" gives every class the same two
    signature halves and encodes identity purely in their arrangement along
    the frame axis; each video shifts its class pattern by a random cyclic
    offset, so no single frame index carries the class and any classifier
    that averages over frames is at chance.
    """

    n_classes: int = 10
    videos_per_class: int = 20
    frames: int = 8
    patch_rows: int = 7
    channels: int = 32
    object_dim: int = 8
    noise_std: float = 0.1
    spatial_jitter: str = "video"
    temporal_mode: str = "none"
    seed: int = 7

    def __post_init__(self):
        if self.n_classes < 1 or self.videos_per_class < 1:
            raise ConfigError("n_classes and videos_per_class must be positive")
        if self.frames < 1 or self.patch_rows < 1 or self.channels < 1:
            raise ConfigError("frames, patch_rows, and channels must be positive")
        if not 0 <= self.object_dim <= self.channels:
            raise ConfigError(
                f"object_dim must lie in [0, channels], got {self.object_dim} with channels={self.channels}"
            )
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.spatial_jitter not in _JITTER_MODES:
            raise ConfigError(f"spatial_jitter must be one of {_JITTER_MODES}, got {self.spatial_jitter!r}")
        if self.temporal_mode not in _TEMPORAL_MODES:
            raise ConfigError(f"temporal_mode must be one of {_TEMPORAL_MODES}, got {self.temporal_mode!r}")
        if self.temporal_mode == "order-pair":
            if self.frames % 2 != 0:
                raise ConfigError("order-pair mode needs an even frame count")
            if self.object_dim < 2:
                raise ConfigError("order-pair mode needs object_dim >= 2 to split the signature")
            n_patterns = max_order_classes(self.frames)
            if self.n_classes > n_patterns:
                raise ConfigError(
                    f"order-pair mode with frames={self.frames} supports at most "
                    f"{n_patterns} rotation-distinct classes, got {self.n_classes}"
                )

    @property
    def n_patches(self) -> int:
        return self.patch_rows * self.patch_rows


def _rotations(pattern: tuple[int, ...]) -> list[tuple[int, ...]]:
    return [pattern[s:] + pattern[:s] for s in range(len(pattern))]


def _order_pattern_pairs(frames: int):
    """Yield (pattern, complement) canonical pairs of balanced 0/1 patterns.

    Each yielded pattern is the lexicographically smallest rotation of its
    cyclic orbit, orbits are emitted once, and patterns whose complement is
    one of their own rotations are dropped. Because videos carry a random
    cyclic shift of their class pattern, any two usable classes must stay
    distinct under every relative rotation; this enumeration guarantees it.
    """
    half = frames // 2
    seen: set[tuple[int, ...]] = set()
    for ones in itertools.combinations(range(frames), half):
        pat = tuple(1 if i in ones else 0 for i in range(frames))
        canon = min(_rotations(pat))
        if canon in seen:
            continue
        comp = tuple(1 - b for b in canon)
        comp_canon = min(_rotations(comp))
        seen.add(canon)
        seen.add(comp_canon)
        if comp_canon == canon:
            continue
        yield canon, comp_canon


def max_order_classes(frames: int) -> int:
    """Largest usable class count for order-pair mode at this frame count."""
    return 2 * sum(1 for _ in _order_pattern_pairs(frames))


def _order_patterns(frames: int, n_classes: int) -> list[tuple[int, ...]]:
    """Class patterns for order-pair mode, complement-paired.

    Class 2j gets the j-th canonical pattern and class 2j+1 its complement;
    every pattern has exactly frames/2 ones, so all classes share one
    frame-mean no matter how a video's copy is cyclically shifted.
    Enumeration is deterministic, so the same frame count always yields the
    same class patterns.
    """
    patterns: list[tuple[int, ...]] = []
    for canon, comp_canon in _order_pattern_pairs(frames):
        patterns.append(canon)
        patterns.append(comp_canon)
        if len(patterns) >= n_classes:
            break
    return patterns[:n_classes]


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ConfigError("degenerate zero signature draw")
    return v / norm


def generate_synthetic(spec: SynthSpec) -> FeatureDataset:
    """Deterministically build a dataset of float32 feature videos.

    Each video is Gaussian background (std noise_std) plus a planted
    signature at one grid position per frame. Plain mode plants the class
    prototype over the first object_dim channels. Order-pair mode plants
    half A or half B per frame according to the class pattern, cyclically
    shifted by a fresh random offset per video; A and B are shared by all
    classes and live on disjoint channel slices, and balanced patterns keep
    every video's frame-mean identical across classes.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    L, P2, D = spec.frames, spec.n_patches, spec.channels

    patterns: list[tuple[int, ...]] | None = None
    half_a = half_b = None
    a_slice = b_slice = None
    if spec.temporal_mode == "order-pair":
        patterns = _order_patterns(spec.frames, spec.n_classes)
        h = spec.object_dim // 2
        a_slice = slice(0, h)
        b_slice = slice(h, spec.object_dim)
        half_a = _unit(rng.normal(size=h))
        half_b = _unit(rng.normal(size=spec.object_dim - h))

    classes: list[ClassRecord] = []
    for c in range(spec.n_classes):
        proto = None
        pattern = None
        if spec.temporal_mode == "order-pair":
            pattern = patterns[c]
        elif spec.object_dim > 0:
            proto = _unit(rng.normal(size=spec.object_dim))

        class_pos = int(rng.integers(0, P2)) if spec.spatial_jitter == "none" else None
        videos: list[np.ndarray] = []
        metas: list[dict] = []
        for _ in range(spec.videos_per_class):
            video = rng.normal(0.0, spec.noise_std, size=(L, P2, D))
            if spec.spatial_jitter == "frame":
                positions = rng.integers(0, P2, size=L)
            elif spec.spatial_jitter == "video":
                positions = np.full(L, int(rng.integers(0, P2)))
            else:
                positions = np.full(L, class_pos)
            shift = None
            vid_pattern = None
            if pattern is not None:
                shift = int(rng.integers(0, L))
                vid_pattern = pattern[shift:] + pattern[:shift]
            for i in range(L):
                p = int(positions[i])
                if vid_pattern is not None:
                    if vid_pattern[i] == 0:
                        video[i, p, a_slice] += half_a
                    else:
                        video[i, p, b_slice] += half_b
                elif proto is not None:
                    video[i, p, : spec.object_dim] += proto
            videos.append(video.astype(np.float32))
            metas.append(
                {"positions": positions.astype(np.int64), "pattern": vid_pattern, "shift": shift}
            )

        pair = None
        if pattern is not None:
            pair = c + 1 if c % 2 == 0 else c - 1
            if pair >= spec.n_classes:
                pair = None
        classes.append(
            ClassRecord(
                class_id=c,
                name=f"class_{c:03d}",
                videos=videos,
                video_meta=metas,
                meta={"prototype": proto, "pattern": pattern, "paired_class": pair},
            )
        )

    return FeatureDataset(
        classes=classes,
        provenance="synthetic",
        meta={"spec": asdict(spec)},
    )


def write_feature_pack(dataset: FeatureDataset, path: str) -> int:
    """Serialize a dataset to a FeaturePack file; returns bytes written.

    Videos are stored grouped by class in listing order, so writing the
    same dataset twice produces byte-identical files.
    """
    L, P2, D = dataset.shape
    n_videos = dataset.n_videos
    if n_videos > 0 and min(L, P2, D) == 0:
        raise PackFormatError("dataset has videos but a degenerate shape")
    n_classes = dataset.n_classes
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(_HEADER.pack(PACK_MAGIC, PACK_VERSION, n_videos, L, P2, D, n_classes))
        for rec in dataset.classes:
            for video in rec.videos:
                written += fh.write(struct.pack("<I", rec.class_id))
                written += fh.write(np.ascontiguousarray(video, dtype="<f4").tobytes())
    return written


def read_feature_pack(path: str) -> FeatureDataset:
    """Parse a FeaturePack file back into a dataset.

    The videos come back bit-identical to what was written. Classes listed
    in the header but holding no videos are kept as empty records, so class
    ids stay aligned with the writer's.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise PackFormatError(
            f"truncated header: need {_HEADER.size} bytes, file has {len(blob)} (at byte offset 0)"
        )
    magic, version, n_videos, L, P2, D, n_classes = _HEADER.unpack_from(blob, 0)
    if magic != PACK_MAGIC:
        raise PackFormatError(f"bad magic {magic!r} at byte offset 0, expected {PACK_MAGIC!r}")
    if version != PACK_VERSION:
        raise PackFormatError(f"unsupported version {version} at byte offset 4")
    per_video = 4 + 4 * L * P2 * D
    expected = _HEADER.size + n_videos * per_video
    if len(blob) != expected:
        raise PackFormatError(
            f"file length {len(blob)} does not match header: expected {expected} bytes "
            f"(28 + {n_videos} * {per_video}); first missing byte offset {min(len(blob), expected)}"
        )

    buckets: dict[int, list[np.ndarray]] = {c: [] for c in range(n_classes)}
    offset = _HEADER.size
    for _ in range(n_videos):
        (class_id,) = struct.unpack_from("<I", blob, offset)
        if class_id >= n_classes:
            raise PackFormatError(
                f"class id {class_id} at byte offset {offset} exceeds n_classes={n_classes}"
            )
        offset += 4
        flat = np.frombuffer(blob, dtype="<f4", count=L * P2 * D, offset=offset)
        buckets[class_id].append(flat.reshape(L, P2, D).copy())
        offset += 4 * L * P2 * D

    classes = [
        ClassRecord(class_id=c, name=f"class_{c:03d}", videos=buckets[c])
        for c in range(n_classes)
    ]
    return FeatureDataset(classes=classes, provenance="file", meta={"path": str(path)})
