"""Episodic training, evaluation, gradient checking, and cost accounting.

Training is deliberately plain: one stochastic gradient step per episode,
no momentum, no schedules. Everything is seed-deterministic; given the
same dataset, config, and seed, two runs produce bit-identical parameters
at a fixed precision.

Seed layout under a master seed m: parameters use derive_seed(m, 0),
training episodes stream from derive_seed(m, 1), the default evaluation
stream from derive_seed(m, 2), and periodic evaluation during training
from derive_seed(m, 3).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tape, Tensor
from .episodes import Episode, FeatureDataset, derive_seed, episode_stream, sample_episode
from .errors import ConfigError
from .model import ModelConfig, SactParams, pn_fsar_forward, sact_forward

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EvalReport",
    "GradCheckReport",
    "CostReport",
    "episode_loss",
    "train",
    "evaluate",
    "grad_check",
    "count_multiadds",
    "reconcile_reference_costs",
]


@dataclass(frozen=True)
class TrainConfig:
    """Episode composition plus optimizer knobs.

    n_query counts queries per episode (one by default, so an evaluation
    bitmap holds exactly one bit per task). learning_rate 0 is allowed and
    leaves parameters untouched, which makes no-op training testable. The
    0.0005 default suits the desk-scale synthetic sets here; roughly 10x
    more works better on larger or easier synthetic sets.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    way: int = 5
    shot: int = 1
    n_query: int = 1
    learning_rate: float = 5e-4
    n_train_tasks: int = 2000
    n_eval_tasks: int = 10000
    eval_every: int = 0
    n_periodic_eval_tasks: int = 200
    master_seed: int = 1
    n_workers: int = 1
    precision: str = "float32"

    def __post_init__(self):
        if self.way < 2:
            raise ConfigError(f"way must be at least 2, got {self.way}")
        if min(self.shot, self.n_query) < 1:
            raise ConfigError(f"shot and n_query must be positive, got {self.shot}/{self.n_query}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if min(self.n_train_tasks, self.n_eval_tasks) < 1:
            raise ConfigError("task counts must be at least 1")
        if self.eval_every < 0 or self.n_periodic_eval_tasks < 1:
            raise ConfigError("eval_every must be >= 0 and n_periodic_eval_tasks positive")
        if self.n_workers < 1:
            raise ConfigError(f"n_workers must be positive, got {self.n_workers}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if f.name == "model" else value
        return out


def episode_loss(logits: Tensor, true_label: int) -> Tensor:
    """Cross-entropy of softmax(logits) against the true class."""
    return ad.cross_entropy_with_logits(logits, true_label)


@dataclass
class TrainResult:
    params: SactParams
    loss_curve: list[float]
    eval_points: list[tuple[int, float]]
    config: TrainConfig


def train(dataset: FeatureDataset, config: TrainConfig) -> TrainResult:
    """Train a fresh model episodically; fully determined by the config."""
    params = SactParams.initialize(config.model, derive_seed(config.master_seed, 0), config.dtype)
    losses: list[float] = []
    eval_points: list[tuple[int, float]] = []
    stream = episode_stream(
        dataset, config.way, config.shot, config.n_query, derive_seed(config.master_seed, 1), config.n_train_tasks
    )
    lr = config.learning_rate
    for t, episode in enumerate(stream):
        params.zero_grad()
        try:
            with Tape() as tape:
                result = sact_forward(episode, params)
                per_query = [episode_loss(lg, lbl) for lg, lbl in zip(result.logits, episode.query_labels)]
                loss = per_query[0] if len(per_query) == 1 else ad.mean(ad.stack(per_query))
            tape.backward(loss)
        except NumericalError as err:
            raise NumericalError(f"training aborted at episode {t} (seed {episode.seed}): {err}") from err
        for p in params.parameters():
            p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)
        losses.append(float(loss.data))
        if config.eval_every and (t + 1) % config.eval_every == 0:
            report = evaluate(
                dataset,
                params,
                config,
                n_tasks=config.n_periodic_eval_tasks,
                seed=derive_seed(config.master_seed, 3),
            )
            eval_points.append((t + 1, report.accuracy))
    return TrainResult(params=params, loss_curve=losses, eval_points=eval_points, config=config)


@dataclass
class EvalReport:
    """Accuracy with a binomial-normal 95 percent interval and raw bits.

    correct[i] is the outcome of the i-th prediction in task order (task t,
    then query index within the task). With one query per task the bitmap
    length equals the task count.
    """

    accuracy: float
    ci95: float
    n_tasks: int
    n_query: int
    seed: int
    model_kind: str
    correct: np.ndarray
    wall_clock_s: float
    config: dict

    def bitmap_hex(self) -> str:
        """Bits packed most-significant-first into bytes, then hex. Trailing
        pad bits in the last byte are zero."""
        bits = np.asarray(self.correct, dtype=np.uint8)
        return np.packbits(bits).tobytes().hex()

    def to_jsonable(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ci95": self.ci95,
            "n_tasks": self.n_tasks,
            "n_query": self.n_query,
            "seed": self.seed,
            "model_kind": self.model_kind,
            "bitmap_hex": self.bitmap_hex(),
            "wall_clock_s": self.wall_clock_s,
            "config": self.config,
        }

    def summary(self) -> str:
        return (
            f"accuracy {self.accuracy:.4f} +- {self.ci95:.4f} "
            f"over {self.n_tasks} tasks (seed {self.seed})"
        )


def evaluate(
    dataset: FeatureDataset,
    params: SactParams | None,
    config: TrainConfig,
    n_tasks: int | None = None,
    seed: int | None = None,
    model_kind: str = "sact",
    n_workers: int | None = None,
) -> EvalReport:
    """Run seeded evaluation tasks; params None selects the baseline.

    Task t draws its episode from derive_seed(seed, t), so results do not
    depend on execution order and a thread pool of any size produces the
    same bitmap.
    """
    if model_kind not in ("sact", "pn_fsar"):
        raise ConfigError(f"model_kind must be 'sact' or 'pn_fsar', got {model_kind!r}")
    if model_kind == "sact" and params is None:
        raise ConfigError("evaluating the attention model requires params")
    n = n_tasks if n_tasks is not None else config.n_eval_tasks
    master = seed if seed is not None else derive_seed(config.master_seed, 2)
    workers = n_workers if n_workers is not None else config.n_workers
    bits = np.zeros(n * config.n_query, dtype=np.uint8)

    def run_task(t: int) -> None:
        episode = sample_episode(dataset, config.way, config.shot, config.n_query, derive_seed(master, t))
        if model_kind == "pn_fsar":
            preds = np.argmax(pn_fsar_forward(episode), axis=1)
        else:
            preds = sact_forward(episode, params).predictions
        for qi, (pred, label) in enumerate(zip(preds, episode.query_labels)):
            bits[t * config.n_query + qi] = 1 if int(pred) == label else 0

    started = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_task, range(n)))
    else:
        for t in range(n):
            run_task(t)
    elapsed = time.perf_counter() - started

    p = float(bits.mean())
    ci = 1.96 * math.sqrt(p * (1.0 - p) / bits.size)
    return EvalReport(
        accuracy=p,
        ci95=ci,
        n_tasks=n,
        n_query=config.n_query,
        seed=master,
        model_kind=model_kind,
        correct=bits,
        wall_clock_s=elapsed,
        config=config.to_dict(),
    )


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_err: float
    tolerance: float
    passed: bool
    seed: int
    config: dict

    def summary(self) -> str:
        lines = [f"{'parameter':<18} max rel err"]
        for name, err in self.per_param.items():
            lines.append(f"{name:<18} {err:.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"overall {self.max_rel_err:.3e} vs tolerance {self.tolerance:g}: {verdict}")
        return "\n".join(lines)


def _tiny_episode(rng: np.random.Generator, way: int, shot: int, shape: tuple[int, int, int]) -> Episode:
    mk = lambda: rng.normal(size=shape)
    support = [[mk() for _ in range(shot)] for _ in range(way)]
    label = int(rng.integers(0, way))
    return Episode(
        support=support,
        support_class_ids=list(range(way)),
        support_refs=[[(c, k) for k in range(shot)] for c in range(way)],
        queries=[mk()],
        query_labels=[label],
        query_refs=[(label, shot)],
        way=way,
        shot=shot,
        seed=0,
    )


def grad_check(
    use_cpe: bool = True,
    use_tmixer: bool = True,
    frame_norm_exponent: int = 2,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    seed: int = 2024,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    Runs a deliberately tiny 2-way 1-shot episode (L=2, P=2, D=3, d_k=2) at
    64-bit precision. The relative error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 0.01); the 0.01 floor
    keeps finite-difference noise on near-zero gradients from dominating
    while still flagging any real backward bug, whose error scales with the
    gradient itself.
    """
    config = ModelConfig(
        frames=2,
        patch_rows=2,
        channels=3,
        embed_dim=2,
        use_cpe=use_cpe,
        use_tmixer=use_tmixer,
        frame_norm_exponent=frame_norm_exponent,
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    episode = _tiny_episode(rng, way=2, shot=1, shape=(config.frames, config.n_patches, config.channels))
    params = SactParams.initialize(config, seed=derive_seed(seed, 0), dtype=np.float64)

    def loss_value() -> float:
        result = sact_forward(episode, params)
        return float(episode_loss(result.logits[0], episode.query_labels[0]).data)

    params.zero_grad()
    with Tape() as tape:
        result = sact_forward(episode, params)
        loss = episode_loss(result.logits[0], episode.query_labels[0])
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params.parameters()}

    per_param: dict[str, float] = {}
    for p in params.parameters():
        flat = p.data.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_value()
            flat[j] = orig - step
            down = loss_value()
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[p.name].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
            worst = max(worst, err)
        per_param[p.name] = worst

    max_err = max(per_param.values())
    return GradCheckReport(
        per_param=per_param,
        max_rel_err=max_err,
        tolerance=tolerance,
        passed=max_err < tolerance,
        seed=seed,
        config=config.to_dict(),
    )


@dataclass
class CostReport:
    """Closed-form multiply-add counts; every component documents its formula.

    Attention costs cover classifying one query against `way` classes of
    `shot` support videos at the post-mixer frame count L'. Mixer costs are
    reported per video and for the episode's way*shot+1 videos. Totals are
    plain sums of their components.
    """

    dims: dict
    sca: dict[str, int]
    tmixer_per_video: dict[str, int]
    formulas: dict[str, str]

    @property
    def sca_total(self) -> int:
        return sum(self.sca.values())

    @property
    def tmixer_video_total(self) -> int:
        return sum(self.tmixer_per_video.values())

    @property
    def tmixer_video_total_nonreducing(self) -> int:
        """Mixer cost with the frame-contraction pair left out.

        The reducing mixer exceeds this by exactly the frame_reduce term,
        which is the whole cost of halving the frame axis.
        """
        return self.tmixer_video_total - self.tmixer_per_video["frame_reduce"]

    @property
    def tmixer_episode_total(self) -> int:
        return self.tmixer_video_total * (self.dims["way"] * self.dims["shot"] + 1)

    @property
    def grand_total(self) -> int:
        return self.sca_total + self.tmixer_episode_total

    def to_jsonable(self) -> dict:
        return {
            "dims": self.dims,
            "sca": self.sca,
            "sca_total": self.sca_total,
            "tmixer_per_video": self.tmixer_per_video,
            "tmixer_video_total": self.tmixer_video_total,
            "tmixer_video_total_nonreducing": self.tmixer_video_total_nonreducing,
            "tmixer_episode_total": self.tmixer_episode_total,
            "grand_total": self.grand_total,
            "formulas": self.formulas,
        }


def count_multiadds(config: ModelConfig, way: int = 5, shot: int = 1) -> CostReport:
    """Multiply-add accounting for one query episode under `config`."""
    Lp = config.out_frames
    L = config.frames
    P2 = config.n_patches
    D = config.channels
    dk = config.embed_dim
    dv = config.d_v
    C, K = way, shot

    sca = {
        "support_key_projection": C * 2 * Lp * K * P2 * D * dk,
        "query_key_projection": Lp * P2 * D * dk,
        "support_value_projection": C * Lp * K * P2 * D * dv,
        "query_value_projection": Lp * P2 * D * dv,
        "attention_scores": C * Lp * P2 * (K * P2) * dk,
        "prototype_reduction": C * Lp * P2 * (K * P2) * dv,
    }
    if config.use_tmixer:
        tmixer = {
            "frame_mix": 2 * L * L * P2 * D,
            "channel_mix": 2 * L * P2 * D * D,
            "frame_reduce": (L * (L // 2) + (L // 2) * (L // 2)) * P2 * D,
            "output_channel_mix": 2 * (L // 2) * P2 * D * D,
        }
    else:
        tmixer = {"frame_mix": 0, "channel_mix": 0, "frame_reduce": 0, "output_channel_mix": 0}

    formulas = {
        "support_key_projection": "way * 2 * L' * shot * P^2 * D * d_k",
        "query_key_projection": "L' * P^2 * D * d_k",
        "support_value_projection": "way * L' * shot * P^2 * D * d_v",
        "query_value_projection": "L' * P^2 * D * d_v",
        "attention_scores": "way * L' * P^2 * (shot * P^2) * d_k",
        "prototype_reduction": "way * L' * P^2 * (shot * P^2) * d_v",
        "frame_mix": "2 * L * L * P^2 * D (two frame-axis layers, per video)",
        "channel_mix": "2 * L * P^2 * D * D (two channel layers, per video)",
        "frame_reduce": "(L * L/2 + (L/2)^2) * P^2 * D (contraction pair, per video)",
        "output_channel_mix": "2 * (L/2) * P^2 * D * D (channel pair after reduction, per video)",
    }
    dims = {
        "frames": L,
        "out_frames": Lp,
        "patch_rows": config.patch_rows,
        "channels": D,
        "embed_dim": dk,
        "value_dim": dv,
        "way": C,
        "shot": K,
        "use_tmixer": config.use_tmixer,
    }
    return CostReport(dims=dims, sca=sca, tmixer_per_video=tmixer, formulas=formulas)


# Published reference totals for the full-scale configuration (8 or 4
# frames, 7x7 patches, 2048 channels, 5-way 5-shot): attention block
# 5.48e9 multi-adds at 8 frames and 3.37e9 at 4, mixer MLPs 419.64e6 and
# 839.28e6. The sweep below asks whether any attention width reproduces
# them under this package's accounting.
REFERENCE_SCA_8_FRAMES = 5.48e9
REFERENCE_SCA_4_FRAMES = 3.37e9
REFERENCE_TMIXER_NONREDUCING = 419.64e6
REFERENCE_TMIXER_REDUCING = 839.28e6


def _reference_sca_total(out_frames: int, dk: int) -> int:
    config = ModelConfig(
        frames=out_frames,
        patch_rows=7,
        channels=2048,
        embed_dim=dk,
        use_tmixer=False,
        use_cpe=True,
    )
    return count_multiadds(config, way=5, shot=5).sca_total


def reconcile_reference_costs(dk_lo: int = 8, dk_hi: int = 256) -> dict:
    """Sweep attention widths against the published full-scale totals.

    For each d_k the report holds this package's 8-frame and 4-frame
    attention totals and their relative deviations from the published
    numbers. The verdict records whether any single d_k lands within 1
    percent on both at once. Since every attention component here is
    linear in the frame count, the 4-frame total is always exactly half
    the 8-frame one, while the published pair has ratio 0.615, so a joint
    match is impossible under this accounting; the closest single-target
    matches are still reported.
    """
    rows = []
    best_joint = None
    best_8 = None
    for dk in range(dk_lo, dk_hi + 1):
        total8 = _reference_sca_total(8, dk)
        total4 = _reference_sca_total(4, dk)
        dev8 = abs(total8 - REFERENCE_SCA_8_FRAMES) / REFERENCE_SCA_8_FRAMES
        dev4 = abs(total4 - REFERENCE_SCA_4_FRAMES) / REFERENCE_SCA_4_FRAMES
        rows.append({"dk": dk, "sca_8_frames": total8, "sca_4_frames": total4, "dev8": dev8, "dev4": dev4})
        joint = max(dev8, dev4)
        if best_joint is None or joint < best_joint["dev"]:
            best_joint = {"dk": dk, "dev": joint}
        if best_8 is None or dev8 < best_8["dev"]:
            best_8 = {"dk": dk, "dev": dev8}
    matched = best_joint["dev"] <= 0.01
    mixer = count_multiadds(
        ModelConfig(frames=8, patch_rows=7, channels=2048, embed_dim=64, use_tmixer=True),
        way=5,
        shot=5,
    )
    reducing = mixer.tmixer_video_total
    nonreducing = mixer.tmixer_video_total_nonreducing
    return {
        "rows": rows,
        "joint_match_within_1pct": matched,
        "best_joint": best_joint,
        "best_8_frame": best_8,
        "frame_ratio_model": 0.5,
        "frame_ratio_published": REFERENCE_SCA_4_FRAMES / REFERENCE_SCA_8_FRAMES,
        "tmixer_reducing": reducing,
        "tmixer_nonreducing": nonreducing,
        "tmixer_published_pair": [REFERENCE_TMIXER_REDUCING, REFERENCE_TMIXER_NONREDUCING],
        "tmixer_note": (
            "the published mixer pair sits exactly 2x apart, but here the reduction "
            "adds only its contraction products, giving ratio "
            f"{reducing / nonreducing:.4f} at full scale, and the channel layers "
            "(quadratic in D) dominate both variants"
        ),
        "verdict": (
            "matched" if matched else
            "no single attention width reproduces both published totals within 1 percent: "
            "every attention component here is linear in the frame count, so halving frames "
            "halves the total, while the published pair implies a ratio of "
            f"{REFERENCE_SCA_4_FRAMES / REFERENCE_SCA_8_FRAMES:.3f}"
        ),
    }
