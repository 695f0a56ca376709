"""The alignment model.

A feature video is a [L, P^2, D] array of patch features. Classification
of a query against a support class runs in four stages:

  1. optional temporal mixer: per-patch MLPs mix information across the
     frame axis, then across channels, then contract L frames to L/2
     (no residual on the contraction), then mix channels once more;
  2. optional conditional positional encoding: a depthwise 3x3
     convolution on the P x P grid, added residually, marks where a patch
     sits relative to its neighbours;
  3. spatial cross-attention: query and support patches of the same frame
     index are projected through one shared matrix, layer-normed, and
     compared; softmax at temperature sqrt(d_k) over all (shot, patch)
     pairs of the class turns the scores into weights that assemble a
     query-specific prototype from value-projected support patches;
  4. distance: per-frame prototype/query differences in value space are
     averaged over frames (1/L or 1/L^2, configurable) before the squared
     norm, then averaged over patches. Logits are negated distances.

The projection used for queries and supports is one shared parameter, so
patches with equal content score maximally against each other from the
first step of training. Value projections always see features without the
positional encoding.

A frame-averaging prototypical baseline (pn_fsar_forward) is included for
comparison; it has no learnable parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .episodes import Episode
from .errors import ConfigError, DataError

__all__ = [
    "ModelConfig",
    "SactParams",
    "ForwardResult",
    "apply_cpe",
    "apply_tmixer",
    "sca_attention",
    "query_prototype",
    "class_distance",
    "sact_forward",
    "pn_fsar_forward",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.

    frames is the clip length L before any mixing, patch_rows the grid
    side P, channels the per-patch feature width D, embed_dim the
    attention width d_k, value_dim the value width d_v (0 means d_k).
    frame_norm_exponent picks 1/L or 1/L^2 for the frame average inside
    the distance.
    """

    frames: int = 8
    patch_rows: int = 7
    channels: int = 32
    embed_dim: int = 64
    value_dim: int = 0
    use_tmixer: bool = True
    use_cpe: bool = True
    frame_norm_exponent: int = 2

    def __post_init__(self):
        if min(self.frames, self.patch_rows, self.channels, self.embed_dim) < 1:
            raise ConfigError(
                "frames, patch_rows, channels, and embed_dim must be positive, got "
                f"{self.frames}/{self.patch_rows}/{self.channels}/{self.embed_dim}"
            )
        if self.value_dim < 0:
            raise ConfigError(f"value_dim must be >= 0, got {self.value_dim}")
        if self.use_tmixer and self.frames % 2 != 0:
            raise ConfigError(f"the temporal mixer halves frames, needs an even count, got {self.frames}")
        if self.frame_norm_exponent not in (1, 2):
            raise ConfigError(f"frame_norm_exponent must be 1 or 2, got {self.frame_norm_exponent}")

    @property
    def n_patches(self) -> int:
        return self.patch_rows * self.patch_rows

    @property
    def d_v(self) -> int:
        return self.value_dim if self.value_dim else self.embed_dim

    @property
    def out_frames(self) -> int:
        """Frame count after the optional temporal mixer."""
        return self.frames // 2 if self.use_tmixer else self.frames

    @property
    def temperature(self) -> float:
        return math.sqrt(self.embed_dim)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**payload)


class SactParams:
    """Learnable parameters for one ModelConfig.

    Initialization: projections and mixer weights are uniform in
    +-1/sqrt(fan_in), layer-norm gains start at 1 and biases at 0, and the
    positional-encoding kernel starts at exactly 0 so the encoding is the
    identity until trained. Parameters are created in a fixed order, so a
    seed fully determines them.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self._params = params
        for name, p in params.items():
            setattr(self, name, p)

    _ORDER = (
        "qk_proj",
        "v_proj",
        "ln_query_gain",
        "ln_query_bias",
        "ln_support_gain",
        "ln_support_bias",
        "cpe_kernel",
        "cpe_bias",
        "frame_mix_in",
        "frame_mix_out",
        "channel_mix_in",
        "channel_mix_out",
        "frame_reduce_in",
        "frame_reduce_out",
        "out_mix_in",
        "out_mix_out",
    )

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "SactParams":
        rng = np.random.Generator(np.random.PCG64(seed))
        L, D, dk, dv = config.frames, config.channels, config.embed_dim, config.d_v

        def uniform(name, shape, fan_in):
            s = 1.0 / math.sqrt(fan_in)
            return Parameter(name, rng.uniform(-s, s, size=shape).astype(dtype))

        params: dict[str, Parameter] = {}
        params["qk_proj"] = uniform("qk_proj", (dk, D), D)
        params["v_proj"] = uniform("v_proj", (dv, D), D)
        params["ln_query_gain"] = Parameter("ln_query_gain", np.ones(dk, dtype=dtype))
        params["ln_query_bias"] = Parameter("ln_query_bias", np.zeros(dk, dtype=dtype))
        params["ln_support_gain"] = Parameter("ln_support_gain", np.ones(dk, dtype=dtype))
        params["ln_support_bias"] = Parameter("ln_support_bias", np.zeros(dk, dtype=dtype))
        if config.use_cpe:
            params["cpe_kernel"] = Parameter("cpe_kernel", np.zeros((3, 3, D), dtype=dtype))
            params["cpe_bias"] = Parameter("cpe_bias", np.zeros(D, dtype=dtype))
        if config.use_tmixer:
            params["frame_mix_in"] = uniform("frame_mix_in", (L, L), L)
            params["frame_mix_out"] = uniform("frame_mix_out", (L, L), L)
            params["channel_mix_in"] = uniform("channel_mix_in", (D, D), D)
            params["channel_mix_out"] = uniform("channel_mix_out", (D, D), D)
            params["frame_reduce_in"] = uniform("frame_reduce_in", (L, L // 2), L)
            params["frame_reduce_out"] = uniform("frame_reduce_out", (L // 2, L // 2), L // 2)
            params["out_mix_in"] = uniform("out_mix_in", (D, D), D)
            params["out_mix_out"] = uniform("out_mix_out", (D, D), D)
        return cls(config, params)

    @property
    def dtype(self):
        return self._params["qk_proj"].data.dtype

    def parameters(self) -> list[Parameter]:
        return [self._params[name] for name in self._ORDER if name in self._params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to_jsonable(self) -> dict:
        return {
            "model_config": self.config.to_dict(),
            "params": {
                p.name: {"shape": list(p.data.shape), "data": p.data.astype(np.float64).ravel().tolist()}
                for p in self.parameters()
            },
        }

    @classmethod
    def from_jsonable(cls, payload: dict, dtype=np.float32) -> "SactParams":
        config = ModelConfig.from_dict(payload["model_config"])
        template = cls.initialize(config, seed=0, dtype=dtype)
        stored = payload["params"]
        params: dict[str, Parameter] = {}
        for p in template.parameters():
            if p.name not in stored:
                raise DataError(f"model file is missing parameter {p.name!r}")
            entry = stored[p.name]
            arr = np.asarray(entry["data"], dtype=dtype).reshape(entry["shape"])
            if arr.shape != p.data.shape:
                raise DataError(
                    f"parameter {p.name!r} has shape {arr.shape}, config implies {p.data.shape}"
                )
            params[p.name] = Parameter(p.name, arr)
        extra = set(stored) - {p.name for p in template.parameters()}
        if extra:
            raise DataError(f"model file has unexpected parameters: {sorted(extra)}")
        return cls(config, params)


@dataclass
class ForwardResult:
    """Per-query logits (tensors, differentiable) and argmax predictions.

    attention, when requested, holds one [L', P^2, K, P^2] numpy array per
    (query, class): frame, query patch, support shot, support patch.
    """

    logits: list[Tensor]
    predictions: list[int]
    attention: list[list[np.ndarray]] | None = None


def _check_episode(episode: Episode, config: ModelConfig) -> None:
    want = (config.frames, config.n_patches, config.channels)
    got = episode.queries[0].shape if episode.queries else None
    if got != want:
        raise DataError(f"episode videos have shape {got}, model expects {want}")


def _as_feature_tensor(video: np.ndarray, dtype) -> Tensor:
    return ad.tensor(np.asarray(video, dtype=dtype))


def _base_features(video: Tensor, params: SactParams) -> Tensor:
    """Raw features for value projection: temporal mixer output if enabled."""
    return apply_tmixer(params, video) if params.config.use_tmixer else video


def apply_cpe(params: SactParams, feats: Tensor) -> Tensor:
    """Add the conditional positional encoding to [F, P^2, D] features.

    The encoding is a depthwise 3x3 zero-padded convolution of the features
    laid out on their P x P grid, plus a channel bias; the residual add
    keeps the original content intact.
    """
    F, P2, D = feats.data.shape
    P = params.config.patch_rows
    grid = ad.reshape(feats, (F, P, P, D))
    enc = ad.depthwise_conv3x3(grid, params.cpe_kernel, params.cpe_bias)
    return ad.add(feats, ad.reshape(enc, (F, P2, D)))


def apply_tmixer(params: SactParams, video: Tensor) -> Tensor:
    """Temporal mixer: [L, P^2, D] -> [L/2, P^2, D].

    Stage 1 mixes along the frame axis for every (patch, channel) column
    with a residual two-layer MLP; stage 2 mixes along channels for every
    (frame, patch) row, also residual; stage 3 contracts L frames to L/2
    with a two-layer MLP and no residual; stage 4 repeats the channel mix
    on the reduced clip. Patches never mix with each other.
    """
    L, P2, D = video.data.shape
    half = L // 2
    frame_view = ad.reshape(video, (L, P2 * D))
    mixed = ad.add(
        frame_view,
        ad.matmul(params.frame_mix_out, ad.relu(ad.matmul(params.frame_mix_in, frame_view))),
    )
    rows = ad.reshape(mixed, (L * P2, D))
    rows = ad.add(
        rows,
        ad.matmul(ad.relu(ad.matmul(rows, ad.transpose(params.channel_mix_in))), ad.transpose(params.channel_mix_out)),
    )
    frame_view = ad.reshape(rows, (L, P2 * D))
    reduced = ad.matmul(
        params.frame_reduce_out,
        ad.relu(ad.matmul(ad.transpose(params.frame_reduce_in), frame_view)),
    )
    rows = ad.reshape(reduced, (half * P2, D))
    rows = ad.add(
        rows,
        ad.matmul(ad.relu(ad.matmul(rows, ad.transpose(params.out_mix_in))), ad.transpose(params.out_mix_out)),
    )
    return ad.reshape(rows, (half, P2, D))


def _attention_features(base: Tensor, params: SactParams) -> Tensor:
    return apply_cpe(params, base) if params.config.use_cpe else base


def _embed(flat: Tensor, params: SactParams, gain: Parameter, bias: Parameter) -> Tensor:
    """LayerNorm(shared projection) of [N, D] rows -> [N, d_k]."""
    return ad.layer_norm(ad.matmul(flat, ad.transpose(params.qk_proj)), gain, bias)


def _support_block(support: list[Tensor]) -> tuple[int, ...]:
    shapes = {s.data.shape for s in support}
    if len(shapes) != 1:
        raise DataError(f"support videos disagree on shape: {sorted(shapes)}")
    return shapes.pop()


def sca_attention(
    query_base: Tensor,
    support_bases: list[Tensor],
    params: SactParams,
) -> Tensor:
    """Attention of one query against one support class.

    Inputs are base features (post-mixer, pre-encoding), [L', P^2, D] each.
    Returns [L', P^2, K, P^2] weights: for every frame i and query patch p,
    a softmax at temperature sqrt(d_k) over the K*P^2 (shot, patch) pairs of
    the class at the same frame index.
    """
    Lq, P2, D = query_base.data.shape
    Ls = _support_block(support_bases)
    if Ls[0] != Lq:
        raise DataError(f"query has {Lq} frames but support has {Ls[0]}; attention pairs equal frame indices")
    K = len(support_bases)
    dk = params.config.embed_dim

    qf = _attention_features(query_base, params)
    q_emb = _embed(ad.reshape(qf, (Lq * P2, D)), params, params.ln_query_gain, params.ln_query_bias)
    q_emb = ad.reshape(q_emb, (Lq, P2, dk))

    sf = [_attention_features(s, params) for s in support_bases]
    block = ad.transpose(ad.stack(sf), (1, 0, 2, 3))  # [L', K, P^2, D]
    s_emb = _embed(ad.reshape(block, (Lq * K * P2, D)), params, params.ln_support_gain, params.ln_support_bias)
    s_emb = ad.reshape(s_emb, (Lq, K * P2, dk))

    scores = ad.matmul(q_emb, ad.transpose(s_emb, (0, 2, 1)))  # [L', P^2, K*P^2]
    weights = ad.softmax(ad.mul_scalar(scores, 1.0 / params.config.temperature), axis=-1)
    return ad.reshape(weights, (Lq, P2, K, P2))


def query_prototype(
    attention: Tensor,
    support_bases: list[Tensor],
    params: SactParams,
) -> Tensor:
    """Attention-weighted sum of value-projected support patches.

    Values come from the base features directly, without the positional
    encoding. Returns [L', P^2, d_v]: one prototype vector per frame and
    query patch.
    """
    Lq, P2, K, _ = attention.data.shape
    D = params.config.channels
    dv = params.config.d_v
    block = ad.transpose(ad.stack(support_bases), (1, 0, 2, 3))
    values = ad.matmul(ad.reshape(block, (Lq * K * P2, D)), ad.transpose(params.v_proj))
    values = ad.reshape(values, (Lq, K * P2, dv))
    flat = ad.reshape(attention, (Lq, P2, K * P2))
    return ad.matmul(flat, values)


def class_distance(
    query_base: Tensor,
    prototype: Tensor,
    params: SactParams,
) -> Tensor:
    """Scalar distance between a query and one class prototype.

    Per-frame differences in value space are summed over frames and scaled
    by 1/L'^e before the squared norm, then averaged over patches. With
    e=2 this matches an average of frame differences; e=1 keeps the plain
    frame sum.
    """
    Lq, P2, D = query_base.data.shape
    dv = params.config.d_v
    q_values = ad.matmul(ad.reshape(query_base, (Lq * P2, D)), ad.transpose(params.v_proj))
    q_values = ad.reshape(q_values, (Lq, P2, dv))
    diff = ad.sub(prototype, q_values)
    frame_avg = ad.mul_scalar(ad.sum(diff, axis=0), 1.0 / float(Lq**params.config.frame_norm_exponent))
    return ad.mul_scalar(ad.sum(ad.square(frame_avg)), 1.0 / float(P2))


def sact_forward(
    episode: Episode,
    params: SactParams,
    want_attention: bool = False,
) -> ForwardResult:
    """Classify every query of an episode against its support classes.

    Logits are negated distances, so argmax picks the nearest class; ties
    resolve to the lowest class index.
    """
    config = params.config
    dtype = params.dtype
    _check_episode(episode, config)

    support_bases = [
        [_base_features(_as_feature_tensor(v, dtype), params) for v in row]
        for row in episode.support
    ]
    logits_out: list[Tensor] = []
    preds: list[int] = []
    attn_out: list[list[np.ndarray]] | None = [] if want_attention else None
    for q in episode.queries:
        q_base = _base_features(_as_feature_tensor(q, dtype), params)
        distances = []
        attn_maps: list[np.ndarray] = []
        for row in support_bases:
            attn = sca_attention(q_base, row, params)
            proto = query_prototype(attn, row, params)
            distances.append(class_distance(q_base, proto, params))
            if want_attention:
                attn_maps.append(attn.data.copy())
        logits = ad.neg(ad.stack(distances))
        logits_out.append(logits)
        preds.append(int(np.argmax(logits.data)))
        if want_attention:
            attn_out.append(attn_maps)
    return ForwardResult(logits=logits_out, predictions=preds, attention=attn_out)


def pn_fsar_forward(episode: Episode) -> np.ndarray:
    """Frame-averaging prototypical baseline.

    A video embeds as the mean of its patch features over frames and
    patches; each class prototype is the mean of its support embeddings;
    logits are negated squared distances. No learnable parameters, so any
    signal carried purely by patch position or frame order is invisible.
    Returns [n_queries, way] logits; ties resolve to the lowest index.
    """
    protos = np.stack(
        [np.mean([v.mean(axis=(0, 1)) for v in row], axis=0) for row in episode.support]
    )
    out = np.empty((len(episode.queries), len(episode.support)), dtype=protos.dtype)
    for qi, q in enumerate(episode.queries):
        emb = q.mean(axis=(0, 1))
        out[qi] = -np.sum((emb - protos) ** 2, axis=1)
    return out
