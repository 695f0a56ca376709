"""Command line interface.

Subcommands: gen (synthesize a feature pack), train, eval, ablate, attn
(attention export), gradcheck, cost. Options resolve in three layers:
built-in defaults, then an optional key=value config file (--config or the
SACT_CONFIG environment variable), then explicit flags. Unknown config
keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Every artifact a command writes embeds the seed that produced it.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericalError, ShapeError
from .episodes import FeatureDataset, sample_episode
from .errors import ConfigError, DataError, SactError
from .features import (
    SynthSpec,
    generate_synthetic,
    max_order_classes,
    read_feature_pack,
    write_feature_pack,
)
from .model import ModelConfig, SactParams, sact_forward
from .training import (
    TrainConfig,
    count_multiadds,
    evaluate,
    grad_check,
    reconcile_reference_costs,
    train,
)

# name -> (type, default, help). Bools use --name / --no-name flags.
CONFIG_SCHEMA: dict[str, tuple[type, object, str]] = {
    "frames": (int, 8, "frames per video"),
    "patches": (int, 7, "patch grid side P; each frame has P*P patch features"),
    "channels": (int, 32, "feature channels per patch"),
    "dk": (int, 64, "attention embedding width"),
    "dv": (int, 0, "value projection width; 0 means same as dk"),
    "tmixer": (bool, True, "enable the temporal mixer (halves the frame count)"),
    "cpe": (bool, True, "enable the conditional positional encoding"),
    "exponent": (int, 2, "frame averaging exponent in the distance, 1 or 2"),
    "way": (int, 5, "classes per episode"),
    "shot": (int, 1, "support videos per class"),
    "queries": (int, 1, "query videos per episode"),
    "lr": (float, 5e-4, "SGD learning rate"),
    "train_tasks": (int, 2000, "training episodes"),
    "eval_tasks": (int, 10000, "evaluation episodes"),
    "eval_every": (int, 0, "periodic evaluation interval during training; 0 disables"),
    "seed": (int, 1, "master seed"),
    "workers": (int, 1, "evaluation thread pool size"),
    "classes": (int, 10, "synthetic classes"),
    "videos_per_class": (int, 20, "synthetic videos per class"),
    "object_dim": (int, 8, "channels carrying the planted class signature; 0 plants nothing"),
    "noise_std": (float, 0.1, "synthetic background noise level"),
    "spatial_jitter": (str, "video", "planted position resampling: none, video, or frame"),
    "temporal_mode": (str, "none", "temporal structure: none or order-pair"),
    "data_seed": (int, 7, "synthetic generator seed"),
}

_CHOICES = {"spatial_jitter": ("none", "video", "frame"), "temporal_mode": ("none", "order-pair")}


def _parse_config_value(key: str, raw: str):
    kind = CONFIG_SCHEMA[key][0]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as a boolean")
    try:
        value = kind(raw)
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from err
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"config key {key!r}: {value!r} is not one of {_CHOICES[key]}")
    return value


def load_config_file(path: str) -> dict:
    """Parse a key = value config file; '#' starts a comment."""
    values: dict[str, object] = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {body!r}")
        key, raw = body.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_config_value(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> tuple[dict, set[str]]:
    """defaults < config file < flags; returns values and explicitly set keys."""
    cfg = {key: spec[1] for key, spec in CONFIG_SCHEMA.items()}
    provided: set[str] = set()
    path = getattr(args, "config", None) or os.environ.get("SACT_CONFIG")
    if path:
        file_values = load_config_file(path)
        cfg.update(file_values)
        provided.update(file_values)
    for key in CONFIG_SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
            provided.add(key)
    return cfg, provided


def _add_schema_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", metavar="FILE", help="key = value config file (or set SACT_CONFIG)")
    for key, (kind, default, help_text) in CONFIG_SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(
                flag,
                dest=key,
                action=argparse.BooleanOptionalAction,
                default=None,
                help=f"{help_text} (default {default})",
            )
        elif key in _CHOICES:
            parser.add_argument(flag, dest=key, choices=_CHOICES[key], default=None, help=f"{help_text} (default {default})")
        else:
            parser.add_argument(flag, dest=key, type=kind, default=None, metavar=kind.__name__.upper(), help=f"{help_text} (default {default})")


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        frames=cfg["frames"],
        patch_rows=cfg["patches"],
        channels=cfg["channels"],
        embed_dim=cfg["dk"],
        value_dim=cfg["dv"],
        use_tmixer=cfg["tmixer"],
        use_cpe=cfg["cpe"],
        frame_norm_exponent=cfg["exponent"],
    )


def _train_config(cfg: dict, model: ModelConfig | None = None) -> TrainConfig:
    return TrainConfig(
        model=model if model is not None else _model_config(cfg),
        way=cfg["way"],
        shot=cfg["shot"],
        n_query=cfg["queries"],
        learning_rate=cfg["lr"],
        n_train_tasks=cfg["train_tasks"],
        n_eval_tasks=cfg["eval_tasks"],
        eval_every=cfg["eval_every"],
        master_seed=cfg["seed"],
        n_workers=cfg["workers"],
    )


def _synth_spec(cfg: dict, **overrides) -> SynthSpec:
    values = dict(
        n_classes=cfg["classes"],
        videos_per_class=cfg["videos_per_class"],
        frames=cfg["frames"],
        patch_rows=cfg["patches"],
        channels=cfg["channels"],
        object_dim=cfg["object_dim"],
        noise_std=cfg["noise_std"],
        spatial_jitter=cfg["spatial_jitter"],
        temporal_mode=cfg["temporal_mode"],
        seed=cfg["data_seed"],
    )
    values.update(overrides)
    return SynthSpec(**values)


def _load_dataset(args: argparse.Namespace, cfg: dict) -> FeatureDataset:
    data = getattr(args, "data", None)
    synthetic = getattr(args, "synthetic", False)
    if data and synthetic:
        raise ConfigError("pass either --data or --synthetic, not both")
    if data:
        return read_feature_pack(data)
    if synthetic:
        return generate_synthetic(_synth_spec(cfg))
    raise ConfigError("a data source is required: --data PACK or --synthetic")


def _save_model(params: SactParams, train_cfg: TrainConfig, path: str) -> None:
    payload = params.to_jsonable()
    payload["format"] = "sact-model"
    payload["version"] = 1
    payload["seed"] = train_cfg.master_seed
    payload["train_config"] = train_cfg.to_dict()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _load_model(path: str) -> SactParams:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as err:
        raise DataError(f"cannot read model file {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise DataError(f"model file {path} is not valid JSON: {err}") from err
    if payload.get("format") != "sact-model":
        raise DataError(f"model file {path} has format {payload.get('format')!r}, expected 'sact-model'")
    return SactParams.from_jsonable(payload)


def cmd_gen(args: argparse.Namespace) -> int:
    cfg, _ = resolve_config(args)
    spec = _synth_spec(cfg)
    dataset = generate_synthetic(spec)
    n_bytes = write_feature_pack(dataset, args.out)
    L, P2, D = dataset.shape
    print(
        f"wrote {args.out}: {dataset.n_videos} videos, {dataset.n_classes} classes, "
        f"shape [{L} x {P2} x {D}], {n_bytes} bytes (seed {spec.seed})"
    )
    if spec.temporal_mode == "order-pair":
        pairs = []
        for rec in dataset.classes:
            pair = rec.meta.get("paired_class")
            if pair is not None and rec.class_id < pair:
                pairs.append(f"{rec.class_id}<->{pair}")
        print(f"order-pair classes share signature halves; pairs: {', '.join(pairs)}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg, _ = resolve_config(args)
    dataset = _load_dataset(args, cfg)
    train_cfg = _train_config(cfg)
    result = train(dataset, train_cfg)
    _save_model(result.params, train_cfg, args.out)
    out_stem = Path(args.out).with_suffix("")
    curve_path = Path(f"{out_stem}_loss.json")
    curve_path.write_text(
        json.dumps(
            {
                "seed": train_cfg.master_seed,
                "loss": result.loss_curve,
                "eval_points": result.eval_points,
                "config": train_cfg.to_dict(),
            },
            indent=2,
            sort_keys=True,
        )
    )
    outputs = [str(args.out), str(curve_path)]
    if not args.no_plots:
        from . import plots

        fig_path = f"{out_stem}_loss.png"
        plots.save_loss_curve(result.loss_curve, fig_path)
        outputs.append(fig_path)
    tail = result.loss_curve[-100:]
    print(
        f"trained {train_cfg.n_train_tasks} episodes (lr {train_cfg.learning_rate}, seed {train_cfg.master_seed}); "
        f"mean loss over last {len(tail)}: {float(np.mean(tail)):.4f}"
    )
    print("wrote " + ", ".join(outputs))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg, _ = resolve_config(args)
    dataset = _load_dataset(args, cfg)
    if args.pn:
        params = None
        kind = "pn_fsar"
        train_cfg = _train_config(cfg)
    else:
        if not args.model:
            raise ConfigError("pass --model MODEL.json or --pn")
        params = _load_model(args.model)
        kind = "sact"
        train_cfg = _train_config(cfg, model=params.config)
    n_tasks = args.tasks if args.tasks is not None else cfg["eval_tasks"]
    report = evaluate(
        dataset,
        params,
        train_cfg,
        n_tasks=n_tasks,
        seed=cfg["seed"],
        model_kind=kind,
        n_workers=cfg["workers"],
    )
    print(f"{kind}: {report.summary()}")
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_jsonable(), indent=2, sort_keys=True))
        print(f"wrote {args.report}")
    return 0


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _sweep_cell(dataset: FeatureDataset, cfg: dict, model: ModelConfig) -> dict:
    train_cfg = _train_config(cfg, model=model)
    result = train(dataset, train_cfg)
    report = evaluate(dataset, result.params, train_cfg, n_tasks=cfg["eval_tasks"], n_workers=cfg["workers"])
    return {"accuracy": round(report.accuracy, 6), "ci95": round(report.ci95, 6), "n_tasks": report.n_tasks, "seed": cfg["seed"]}


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg, provided = resolve_config(args)
    # Sweeps retrain per setting, so default to a lighter budget unless the
    # caller asked for specific counts.
    if "train_tasks" not in provided:
        cfg["train_tasks"] = 400
    if "eval_tasks" not in provided:
        cfg["eval_tasks"] = 500
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    if args.sweep == "patches":
        for p in range(1, 8):
            dataset = generate_synthetic(_synth_spec(cfg, patch_rows=p))
            model = _model_config({**cfg, "patches": p})
            cell = _sweep_cell(dataset, cfg, model)
            rows.append({"patches": p, **cell})
        header = ["patches", "accuracy", "ci95", "n_tasks", "seed"]
        x_key = "patches"
    elif args.sweep == "tmixer":
        datasets = []
        if args.dataset in ("spatial", "both"):
            datasets.append(("spatial", _synth_spec(cfg, temporal_mode="none")))
        if args.dataset in ("order-pair", "both"):
            pair_kw = {}
            if "classes" not in provided:
                # order-pair admits fewer classes than the spatial default
                pair_kw["n_classes"] = min(cfg["classes"], max_order_classes(cfg["frames"]))
            datasets.append(
                ("order-pair", _synth_spec(cfg, temporal_mode="order-pair", **pair_kw))
            )
        for name, spec in datasets:
            dataset = generate_synthetic(spec)
            for flag in (True, False):
                model = _model_config({**cfg, "tmixer": flag})
                cell = _sweep_cell(dataset, cfg, model)
                rows.append({"dataset": name, "tmixer": "on" if flag else "off", **cell})
        header = ["dataset", "tmixer", "accuracy", "ci95", "n_tasks", "seed"]
        x_key = "tmixer"
    else:  # exponent
        dataset = generate_synthetic(_synth_spec(cfg))
        for e in (1, 2):
            model = _model_config({**cfg, "exponent": e})
            cell = _sweep_cell(dataset, cfg, model)
            rows.append({"exponent": e, **cell})
        header = ["exponent", "accuracy", "ci95", "n_tasks", "seed"]
        x_key = "exponent"

    csv_path = out_dir / f"sweep_{args.sweep}.csv"
    _write_csv(csv_path, header, rows)
    outputs = [str(csv_path)]
    if not args.no_plots:
        from . import plots

        fig_path = out_dir / f"sweep_{args.sweep}.png"
        if args.sweep == "tmixer":
            labeled = [dict(row, tmixer=f"{row['dataset']}/{row['tmixer']}") for row in rows]
            plots.save_sweep_curve(labeled, x_key, str(fig_path), title="temporal mixer ablation")
        else:
            plots.save_sweep_curve(rows, x_key, str(fig_path), title=f"{args.sweep} sweep")
        outputs.append(str(fig_path))
    print(f"{args.sweep} sweep: {len(rows)} rows (seed {cfg['seed']})")
    print("wrote " + ", ".join(outputs))
    return 0


def _pool_bounds(p: int, g: int) -> list[tuple[int, int]]:
    return [(math.floor(i * p / g), math.floor((i + 1) * p / g)) for i in range(g)]


def pool_attention_matrix(mat: np.ndarray, patch_rows: int, group_rows: int) -> np.ndarray:
    """Average query-patch groups and sum support-patch groups on a P x P
    grid partitioned into G x G cells, preserving each row's unit mass."""
    p, g = patch_rows, group_rows
    grid = mat.reshape(p, p, p, p)
    bounds = _pool_bounds(p, g)
    out = np.zeros((g * g, g * g), dtype=mat.dtype)
    for qa, (q0, q1) in enumerate(bounds):
        for qb, (r0, r1) in enumerate(bounds):
            rows = grid[q0:q1, r0:r1]
            for sa, (s0, s1) in enumerate(bounds):
                for sb, (t0, t1) in enumerate(bounds):
                    cells = rows[:, :, s0:s1, t0:t1].sum(axis=(2, 3))
                    out[qa * g + qb, sa * g + sb] = cells.mean()
    return out


def cmd_attn(args: argparse.Namespace) -> int:
    cfg, _ = resolve_config(args)
    dataset = _load_dataset(args, cfg)
    params = _load_model(args.model)
    config = params.config
    if args.downsample < 0:
        raise ConfigError(f"--downsample must be >= 0, got {args.downsample}")
    if args.downsample > config.patch_rows:
        raise ConfigError(
            f"--downsample {args.downsample} exceeds the patch grid side {config.patch_rows}"
        )
    episode_seed = args.episode_seed if args.episode_seed is not None else cfg["seed"]
    episode = sample_episode(dataset, cfg["way"], cfg["shot"], 1, episode_seed)
    result = sact_forward(episode, params, want_attention=True)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    matrices: dict[int, np.ndarray] = {}
    manifest: dict = {
        "episode_seed": episode_seed,
        "way": cfg["way"],
        "shot": cfg["shot"],
        "class_ids": episode.support_class_ids,
        "true_label": episode.query_labels[0],
        "true_class_id": episode.support_class_ids[episode.query_labels[0]],
        "aggregation": "mean over frames, sum over support shots; downsampling averages query-patch groups and sums support-patch groups",
        "downsample": args.downsample,
        "model_config": config.to_dict(),
        "files": {},
        "row_argmax": {},
    }
    for ci, class_id in enumerate(episode.support_class_ids):
        attn = result.attention[0][ci]  # [L', P^2, K, P^2]
        mat = attn.mean(axis=0).sum(axis=1)  # [P^2, P^2]
        if args.downsample:
            mat = pool_attention_matrix(mat, config.patch_rows, args.downsample)
        matrices[class_id] = mat
        name = f"attention_class_{class_id:03d}.csv"
        with open(out_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"s{j}" for j in range(mat.shape[1])])
            for row in mat:
                writer.writerow([f"{v:.10g}" for v in row])
        manifest["files"][str(class_id)] = name
        manifest["row_argmax"][str(class_id)] = np.argmax(mat, axis=1).tolist()

    if dataset.provenance == "synthetic":
        planted: dict = {"query": None, "support": {}}
        cid, vid = episode.query_refs[0]
        rec = next(r for r in dataset.classes if r.class_id == cid)
        if rec.video_meta:
            planted["query"] = rec.video_meta[vid]["positions"].tolist()
        for row_refs, class_id in zip(episode.support_refs, episode.support_class_ids):
            rec = next(r for r in dataset.classes if r.class_id == class_id)
            if rec.video_meta:
                planted["support"][str(class_id)] = [
                    rec.video_meta[v]["positions"].tolist() for _, v in row_refs
                ]
        manifest["planted_positions"] = planted

    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    outputs = [str(out_dir / "manifest.json")] + [str(out_dir / f) for f in manifest["files"].values()]
    if not args.no_plots:
        from . import plots

        fig_path = out_dir / "attention.png"
        plots.save_attention_grid(matrices, str(fig_path), true_class=manifest["true_class_id"])
        outputs.append(str(fig_path))
    print(f"exported attention for episode seed {episode_seed}: true class {manifest['true_class_id']}")
    print("wrote " + ", ".join(outputs))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    worst = 0.0
    failed = False
    for use_cpe in (False, True):
        for use_tmixer in (False, True):
            for exponent in (1, 2):
                report = grad_check(
                    use_cpe=use_cpe,
                    use_tmixer=use_tmixer,
                    frame_norm_exponent=exponent,
                    tolerance=args.tolerance,
                )
                state = "PASS" if report.passed else "FAIL"
                print(
                    f"cpe={'on' if use_cpe else 'off':<3} tmixer={'on' if use_tmixer else 'off':<3} "
                    f"exponent={exponent}: max rel err {report.max_rel_err:.3e} [{state}]"
                )
                worst = max(worst, report.max_rel_err)
                failed = failed or not report.passed
    print(f"worst over all combinations: {worst:.3e} (tolerance {args.tolerance:g})")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return 4
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    cfg, _ = resolve_config(args)
    config = _model_config(cfg)
    report = count_multiadds(config, way=cfg["way"], shot=cfg["shot"])
    print(f"attention block, one query vs {cfg['way']} classes x {cfg['shot']} shots at L'={config.out_frames}:")
    for name, count in report.sca.items():
        print(f"  {name:<26} {count:>16,}  = {report.formulas[name]}")
    print(f"  {'total':<26} {report.sca_total:>16,}")
    if config.use_tmixer:
        print("temporal mixer, per video:")
        for name, count in report.tmixer_per_video.items():
            print(f"  {name:<26} {count:>16,}  = {report.formulas[name]}")
        print(f"  {'total':<26} {report.tmixer_video_total:>16,}")
        print(f"  {'total without reduction':<26} {report.tmixer_video_total_nonreducing:>16,}")
        print(f"  episode total ({cfg['way'] * cfg['shot'] + 1} videos): {report.tmixer_episode_total:,}")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_jsonable(), indent=2, sort_keys=True))
        print(f"wrote {args.out}")
    if args.sweep_reference:
        finding = reconcile_reference_costs()
        print(f"reference sweep verdict: {finding['verdict']}")
        best8 = finding["best_8_frame"]
        print(
            f"closest 8-frame match: dk={best8['dk']} at {best8['dev'] * 100:.2f}% deviation; "
            f"joint best dk={finding['best_joint']['dk']} at {finding['best_joint']['dev'] * 100:.2f}%"
        )
        print(f"mixer note: {finding['tmixer_note']}")
        if args.out_dir:
            out_dir = Path(args.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / "reference_sweep.csv"
            _write_csv(
                path,
                ["dk", "sca_8_frames", "sca_4_frames", "dev8", "dev4"],
                [
                    {**row, "dev8": f"{row['dev8']:.6f}", "dev4": f"{row['dev4']:.6f}"}
                    for row in finding["rows"]
                ],
            )
            print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sact",
        description="Few-shot action recognition over patch features with spatial cross-attention.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic feature pack", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_schema_flags(p)
    p.add_argument("--spec", dest="config", metavar="FILE", help="alias for --config")
    p.add_argument("--out", required=True, help="output pack path")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model episodically", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_schema_flags(p)
    p.add_argument("--data", help="feature pack to train on")
    p.add_argument("--synthetic", action="store_true", help="train on synthetic data built from the config")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--no-plots", action="store_true", help="skip the loss curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model over seeded tasks", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_schema_flags(p)
    p.add_argument("--model", help="model JSON from train")
    p.add_argument("--pn", action="store_true", help="evaluate the frame-averaging prototypical baseline instead")
    p.add_argument("--data", help="feature pack to evaluate on")
    p.add_argument("--synthetic", action="store_true", help="evaluate on synthetic data built from the config")
    p.add_argument("--tasks", type=int, default=None, help="evaluation episodes (defaults to --eval-tasks)")
    p.add_argument("--report", help="write the full report (bitmap included) to this JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate across one swept setting", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_schema_flags(p)
    p.add_argument("--sweep", required=True, choices=("patches", "tmixer", "exponent"))
    p.add_argument("--dataset", choices=("spatial", "order-pair", "both"), default="both", help="datasets for the tmixer sweep")
    p.add_argument("--out-dir", required=True, help="directory for the CSV and figure")
    p.add_argument("--no-plots", action="store_true", help="skip the figure")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn", help="export attention matrices for one episode", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_schema_flags(p)
    p.add_argument("--model", required=True, help="model JSON from train")
    p.add_argument("--data", help="feature pack")
    p.add_argument("--synthetic", action="store_true", help="use synthetic data built from the config")
    p.add_argument("--episode-seed", type=int, default=None, help="episode seed (defaults to --seed)")
    p.add_argument("--downsample", type=int, default=0, help="pool the P x P grid to G x G; 0 keeps full resolution")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip the heatmap figure")
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference check over all flag combinations")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cost", help="closed-form multiply-add accounting", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_schema_flags(p)
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--sweep-reference", action="store_true", help="sweep attention widths against the published full-scale totals")
    p.add_argument("--out-dir", help="directory for the reference sweep CSV")
    p.set_defaults(func=cmd_cost)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except (DataError, ShapeError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 4
    except SactError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
