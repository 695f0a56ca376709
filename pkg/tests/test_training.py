"""Training loop, evaluation, gradient checking, and cost accounting."""

import json
import math

import numpy as np
import pytest

import sact.autodiff as ad
from sact.autodiff import NumericalError, Tape
from sact.episodes import derive_seed, sample_episode
from sact.errors import ConfigError
from sact.features import SynthSpec, generate_synthetic
from sact.model import ModelConfig, SactParams, sact_forward
from sact.training import (
    EvalReport,
    TrainConfig,
    count_multiadds,
    episode_loss,
    evaluate,
    grad_check,
    reconcile_reference_costs,
    train,
)


def tiny_dataset(**kw):
    base = dict(
        n_classes=6,
        videos_per_class=8,
        frames=4,
        patch_rows=2,
        channels=6,
        object_dim=3,
        noise_std=0.1,
        spatial_jitter="video",
        temporal_mode="none",
        seed=11,
    )
    base.update(kw)
    return generate_synthetic(SynthSpec(**base))


def tiny_model(**kw):
    base = dict(
        frames=4,
        patch_rows=2,
        channels=6,
        embed_dim=5,
        value_dim=5,
        use_tmixer=False,
        use_cpe=False,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_config(**kw):
    base = dict(model=tiny_model(), way=3, shot=1, n_query=1, learning_rate=0.01,
                n_train_tasks=5, master_seed=9)
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------ episode loss


def test_uniform_logits_cost_log_way():
    for way in (3, 5):
        logits = ad.tensor(np.zeros(way, dtype=np.float64))
        loss = episode_loss(logits, 0)
        assert float(loss.data) == pytest.approx(math.log(way), abs=1e-12)


def test_confident_logits_cost_nothing():
    logits = ad.tensor(np.array([50.0, 0.0, -10.0], dtype=np.float64))
    assert float(episode_loss(logits, 0).data) < 1e-20


def test_loss_matches_logsumexp_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        z = rng.normal(size=5)
        label = int(rng.integers(0, 5))
        expected = float(np.log(np.sum(np.exp(z - z.max()))) + z.max() - z[label])
        got = float(episode_loss(ad.tensor(z), label).data)
        assert got == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------------------ train config


def test_config_rejects_bad_values():
    for kw in (
        dict(way=1),
        dict(shot=0),
        dict(n_query=0),
        dict(learning_rate=-0.1),
        dict(n_train_tasks=0),
        dict(n_eval_tasks=0),
        dict(eval_every=-1),
        dict(n_periodic_eval_tasks=0),
        dict(n_workers=0),
        dict(precision="half"),
    ):
        with pytest.raises(ConfigError):
            tiny_config(**kw)


def test_zero_learning_rate_is_legal_and_freezes_params():
    ds = tiny_dataset()
    cfg = tiny_config(learning_rate=0.0, n_train_tasks=4)
    result = train(ds, cfg)
    fresh = SactParams.initialize(cfg.model, derive_seed(cfg.master_seed, 0), cfg.dtype)
    for got, want in zip(result.params.parameters(), fresh.parameters()):
        np.testing.assert_array_equal(got.data, want.data)


def test_config_serializes_to_plain_json():
    cfg = tiny_config()
    d = cfg.to_dict()
    assert d["way"] == 3 and d["model"]["embed_dim"] == 5
    json.dumps(d)  # no numpy leakage


def test_precision_selects_dtype():
    assert tiny_config().dtype == np.float32
    assert tiny_config(precision="float64").dtype == np.float64


# ------------------------------------------------------------ training loop


def test_loss_curve_has_one_entry_per_episode():
    result = train(tiny_dataset(), tiny_config(n_train_tasks=7))
    assert len(result.loss_curve) == 7
    assert all(np.isfinite(v) for v in result.loss_curve)
    assert result.eval_points == []


def test_periodic_eval_points():
    cfg = tiny_config(n_train_tasks=6, eval_every=3, n_periodic_eval_tasks=8)
    result = train(tiny_dataset(), cfg)
    assert [t for t, _ in result.eval_points] == [3, 6]
    assert all(0.0 <= a <= 1.0 for _, a in result.eval_points)


def test_single_step_is_plain_sgd():
    ds = tiny_dataset()
    cfg = tiny_config(n_train_tasks=1, learning_rate=0.05)

    # replay the step by hand: same init seed, same first episode
    params = SactParams.initialize(cfg.model, derive_seed(cfg.master_seed, 0), cfg.dtype)
    episode = sample_episode(
        ds, cfg.way, cfg.shot, cfg.n_query, derive_seed(derive_seed(cfg.master_seed, 1), 0)
    )
    params.zero_grad()
    with Tape() as tape:
        result = sact_forward(episode, params)
        loss = episode_loss(result.logits[0], episode.query_labels[0])
    tape.backward(loss)
    expected = {
        p.name: p.data - (cfg.learning_rate * p.grad).astype(p.data.dtype)
        for p in params.parameters()
    }

    trained = train(ds, cfg).params
    for p in trained.parameters():
        np.testing.assert_array_equal(p.data, expected[p.name])


def test_training_twice_is_bit_identical_at_double_precision():
    ds = tiny_dataset()
    cfg = tiny_config(n_train_tasks=20, learning_rate=0.05, precision="float64")
    a = train(ds, cfg)
    b = train(ds, cfg)
    assert a.loss_curve == b.loss_curve
    for pa, pb in zip(a.params.parameters(), b.params.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()


def test_divergence_reports_the_failing_episode():
    ds = tiny_dataset(
        n_classes=6, videos_per_class=10, frames=8, patch_rows=3, channels=16,
        object_dim=16, noise_std=0.05, seed=7,
    )
    model = tiny_model(frames=8, patch_rows=3, channels=16, embed_dim=16,
                       value_dim=16, use_tmixer=True, frame_norm_exponent=1)
    cfg = tiny_config(model=model, way=5, learning_rate=50.0, n_train_tasks=400,
                      master_seed=1)
    # the step size is chosen to blow up; ignore the overflow chatter that
    # precedes the nonfinite check firing
    with np.errstate(over="ignore"), pytest.raises(
        NumericalError, match=r"training aborted at episode \d+ \(seed \d+\)"
    ):
        train(ds, cfg)


@pytest.mark.slow
def test_loss_decreases_on_the_spatial_task():
    # 2000 training episodes on planted-signature data: the rolling mean
    # over the last 500 episodes must come out strictly below the first 500
    ds = tiny_dataset(
        n_classes=10, videos_per_class=20, frames=8, patch_rows=7, channels=32,
        object_dim=8, noise_std=0.1, seed=7,
    )
    model = tiny_model(frames=8, patch_rows=7, channels=32, embed_dim=64,
                       value_dim=64, frame_norm_exponent=1)
    cfg = tiny_config(model=model, way=5, learning_rate=0.5, n_train_tasks=2000,
                      master_seed=1)
    curve = train(ds, cfg).loss_curve
    first, last = float(np.mean(curve[:500])), float(np.mean(curve[-500:]))
    assert last < first
    assert first - last > 0.5  # the drop is substantial, not a rounding artifact


# -------------------------------------------------------------- evaluation


def test_evaluate_is_seed_deterministic():
    ds = tiny_dataset()
    cfg = tiny_config()
    params = SactParams.initialize(cfg.model, 21)
    a = evaluate(ds, params, cfg, n_tasks=60, seed=5)
    b = evaluate(ds, params, cfg, n_tasks=60, seed=5)
    c = evaluate(ds, params, cfg, n_tasks=60, seed=6)
    assert a.bitmap_hex() == b.bitmap_hex()
    assert a.accuracy == b.accuracy
    assert a.bitmap_hex() != c.bitmap_hex()


def test_worker_count_does_not_change_the_bitmap():
    ds = tiny_dataset()
    cfg = tiny_config()
    params = SactParams.initialize(cfg.model, 21)
    serial = evaluate(ds, params, cfg, n_tasks=40, seed=5, n_workers=1)
    pooled = evaluate(ds, params, cfg, n_tasks=40, seed=5, n_workers=3)
    assert serial.bitmap_hex() == pooled.bitmap_hex()


def test_interval_uses_the_binomial_normal_formula():
    ds = tiny_dataset()
    cfg = tiny_config(n_query=2)
    params = SactParams.initialize(cfg.model, 21)
    rep = evaluate(ds, params, cfg, n_tasks=30, seed=5)
    assert rep.correct.size == 60  # n_tasks * n_query predictions
    p = float(rep.correct.mean())
    assert rep.accuracy == p
    assert rep.ci95 == 1.96 * math.sqrt(p * (1.0 - p) / 60)


def test_evaluate_defaults_to_the_dedicated_eval_stream():
    ds = tiny_dataset()
    cfg = tiny_config()
    params = SactParams.initialize(cfg.model, 21)
    rep = evaluate(ds, params, cfg, n_tasks=10)
    assert rep.seed == derive_seed(cfg.master_seed, 2)


def test_evaluate_rejects_bad_model_kind_and_missing_params():
    ds = tiny_dataset()
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        evaluate(ds, None, cfg, n_tasks=4, model_kind="nearest")
    with pytest.raises(ConfigError):
        evaluate(ds, None, cfg, n_tasks=4, model_kind="sact")


def test_baseline_solves_easy_spatial_data():
    # strong signal, fixed patch position: frame-averaged prototypes suffice
    ds = tiny_dataset(noise_std=0.02, spatial_jitter="none")
    cfg = tiny_config()
    rep = evaluate(ds, None, cfg, n_tasks=80, seed=3, model_kind="pn_fsar")
    assert rep.model_kind == "pn_fsar"
    assert rep.accuracy > 0.9


def test_untrained_model_sits_at_chance_on_pure_noise():
    ds = tiny_dataset(
        n_classes=10, videos_per_class=20, frames=8, patch_rows=7, channels=32,
        object_dim=0, noise_std=1.0, seed=7,
    )
    model = tiny_model(frames=8, patch_rows=7, channels=32, embed_dim=64, value_dim=64)
    cfg = tiny_config(model=model, way=5)
    rep = evaluate(ds, SactParams.initialize(model, 42), cfg, n_tasks=1000, seed=5,
                   n_workers=2)
    assert 0.16 <= rep.accuracy <= 0.24


def test_bitmap_hex_packs_bits_most_significant_first():
    rep = EvalReport(
        accuracy=0.5, ci95=0.1, n_tasks=8, n_query=1, seed=0, model_kind="sact",
        correct=np.array([1, 0, 1, 1, 0, 0, 0, 1], dtype=np.uint8),
        wall_clock_s=0.0, config={},
    )
    assert rep.bitmap_hex() == "b1"


def test_report_summary_and_json_round_trip():
    ds = tiny_dataset()
    cfg = tiny_config()
    rep = evaluate(ds, SactParams.initialize(cfg.model, 21), cfg, n_tasks=12, seed=5)
    assert rep.summary() == (
        f"accuracy {rep.accuracy:.4f} +- {rep.ci95:.4f} over 12 tasks (seed 5)"
    )
    payload = json.loads(json.dumps(rep.to_jsonable()))
    assert payload["bitmap_hex"] == rep.bitmap_hex()
    assert payload["n_tasks"] == 12


# ----------------------------------------------------------- grad checking


def test_gradients_match_finite_differences_with_everything_on():
    report = grad_check(use_cpe=True, use_tmixer=True, frame_norm_exponent=2)
    assert report.passed
    assert report.max_rel_err < 1e-4


def test_gradients_match_finite_differences_with_everything_off():
    report = grad_check(use_cpe=False, use_tmixer=False, frame_norm_exponent=1)
    assert report.passed
    assert report.max_rel_err < 1e-4


def test_grad_check_catches_a_sign_flipped_relu(monkeypatch):
    original = ad._relu_backward
    monkeypatch.setattr(ad, "_relu_backward", lambda g, mask: -original(g, mask))
    report = grad_check(use_cpe=False, use_tmixer=True, frame_norm_exponent=1)
    assert not report.passed
    # a flipped gradient disagrees with the numeric one by a factor of -1,
    # which the relative error metric scores as about 2
    assert report.max_rel_err > 1.0


def test_grad_check_report_summary_table():
    report = grad_check(use_cpe=False, use_tmixer=False, frame_norm_exponent=2)
    text = report.summary()
    assert "PASS" in text and "qk_proj" in text


# ---------------------------------------------------------- cost accounting


def full_scale_config(**kw):
    base = dict(frames=8, patch_rows=7, channels=32, embed_dim=64, value_dim=64,
                use_tmixer=True, use_cpe=False)
    base.update(kw)
    return ModelConfig(**base)


def test_multiadd_hand_counts():
    # L'=4 after reduction, P^2=49, D=32, d_k=d_v=64, 5-way 1-shot
    report = count_multiadds(full_scale_config(), way=5, shot=1)
    assert report.sca["query_key_projection"] == 4 * 49 * 32 * 64 == 401_408
    assert report.sca["support_key_projection"] == 5 * 2 * 4 * 1 * 49 * 32 * 64 == 4_014_080
    assert report.sca["attention_scores"] == 5 * 4 * 49 * 49 * 64 == 3_073_280
    assert report.sca_total == sum(report.sca.values())
    assert report.grand_total == report.sca_total + report.tmixer_episode_total


def test_attention_cost_is_linear_in_the_frame_count():
    totals = {}
    for frames in (4, 8, 16):
        report = count_multiadds(full_scale_config(frames=frames), way=5, shot=1)
        assert report.dims["out_frames"] == frames // 2
        totals[frames // 2] = report.sca_total
        for value in report.sca.values():
            assert value % (frames // 2) == 0
    assert totals[4] == 2 * totals[2]
    assert totals[8] == 2 * totals[4]


def test_support_costs_scale_with_way_and_shot():
    one = count_multiadds(full_scale_config(), way=2, shot=1)
    wide = count_multiadds(full_scale_config(), way=6, shot=1)
    deep = count_multiadds(full_scale_config(), way=2, shot=4)
    assert wide.sca["support_key_projection"] == 3 * one.sca["support_key_projection"]
    assert deep.sca["attention_scores"] == 4 * one.sca["attention_scores"]
    assert wide.sca["query_key_projection"] == one.sca["query_key_projection"]


def test_mixer_costs_vanish_without_the_mixer():
    report = count_multiadds(full_scale_config(use_tmixer=False), way=5, shot=1)
    assert report.tmixer_video_total == 0
    assert report.dims["out_frames"] == 8  # no reduction without the mixer
    assert report.tmixer_episode_total == 0


def test_frame_reduction_costs_exactly_the_contraction_pair():
    report = count_multiadds(full_scale_config(), way=5, shot=1)
    diff = report.tmixer_video_total - report.tmixer_video_total_nonreducing
    assert diff == report.tmixer_per_video["frame_reduce"]
    L, P2, D = 8, 49, 32
    assert diff == (L * (L // 2) + (L // 2) ** 2) * P2 * D


def test_reference_sweep_documents_its_finding():
    finding = reconcile_reference_costs(dk_lo=64, dk_hi=128)
    assert len(finding["rows"]) == 65
    assert finding["frame_ratio_model"] == 0.5
    assert finding["frame_ratio_published"] == pytest.approx(0.615, abs=0.001)
    # halving frames halves this accounting, so no width matches both
    # published totals at once; the nearest single-target match does exist
    assert finding["joint_match_within_1pct"] is False
    assert finding["best_8_frame"]["dev"] < 0.01
    assert finding["tmixer_reducing"] - finding["tmixer_nonreducing"] > 0
    assert "2x" in finding["tmixer_note"]
