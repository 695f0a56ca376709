"""End-to-end command tests; every command runs in process via main()."""

import csv
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from sact.cli import main, pool_attention_matrix
from sact.features import read_feature_pack
from sact.model import ModelConfig
from sact.training import count_multiadds

# small geometry shared by most commands: 4 frames, 2x2 patches, 6 channels
TINY = [
    "--frames", "4", "--patches", "2", "--channels", "6", "--dk", "5", "--dv", "5",
    "--classes", "4", "--videos-per-class", "6", "--object-dim", "2",
    "--way", "3", "--workers", "1", "--data-seed", "7",
]


@pytest.fixture(autouse=True)
def no_ambient_config(monkeypatch):
    monkeypatch.delenv("SACT_CONFIG", raising=False)


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    """One generated pack and one trained model reused across tests."""
    os.environ.pop("SACT_CONFIG", None)
    root = tmp_path_factory.mktemp("cli")
    pack = root / "pack.fpk"
    model = root / "model.json"
    assert main(["gen", *TINY, "--out", str(pack)]) == 0
    # plots left on deliberately: this covers the loss figure path once
    assert main([
        "train", *TINY, "--data", str(pack), "--train-tasks", "25",
        "--lr", "0.05", "--out", str(model),
    ]) == 0
    return {"root": root, "pack": pack, "model": model}


# ------------------------------------------------------------------- gen


def test_gen_writes_the_documented_byte_count(tmp_path, capsys):
    out = tmp_path / "a.fpk"
    assert main(["gen", *TINY, "--out", str(out)]) == 0
    n, L, P2, D = 24, 4, 4, 6
    expected = 28 + n * (4 + 4 * L * P2 * D)
    assert out.stat().st_size == expected
    text = capsys.readouterr().out
    assert "24 videos, 4 classes" in text and f"{expected} bytes (seed 7)" in text

    again = tmp_path / "b.fpk"
    assert main(["gen", *TINY, "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()  # same config, same bytes


def test_gen_pack_reads_back(workdir):
    ds = read_feature_pack(workdir["pack"])
    assert ds.shape == (4, 4, 6)
    assert ds.n_videos == 24 and ds.n_classes == 4
    assert ds.provenance == "file"


def test_gen_order_pair_reports_class_pairs(tmp_path, capsys):
    out = tmp_path / "pairs.fpk"
    rc = main([
        "gen", "--frames", "8", "--patches", "2", "--channels", "6",
        "--classes", "4", "--videos-per-class", "4", "--object-dim", "4",
        "--temporal-mode", "order-pair", "--out", str(out),
    ])
    assert rc == 0
    text = capsys.readouterr().out
    assert "pairs: 0<->1, 2<->3" in text


# ----------------------------------------------------------------- train


def test_train_writes_model_curve_and_figure(workdir):
    payload = json.loads(workdir["model"].read_text())
    assert payload["format"] == "sact-model" and payload["version"] == 1
    assert payload["train_config"]["n_train_tasks"] == 25

    curve = json.loads((workdir["root"] / "model_loss.json").read_text())
    assert len(curve["loss"]) == 25
    assert curve["seed"] == 1
    assert (workdir["root"] / "model_loss.png").stat().st_size > 0


def test_train_rejects_conflicting_sources(workdir, tmp_path, capsys):
    rc = main([
        "train", *TINY, "--data", str(workdir["pack"]), "--synthetic",
        "--out", str(tmp_path / "m.json"),
    ])
    assert rc == 2
    assert "either --data or --synthetic" in capsys.readouterr().err


def test_train_on_synthetic_source(tmp_path):
    rc = main([
        "train", *TINY, "--synthetic", "--train-tasks", "3",
        "--out", str(tmp_path / "m.json"), "--no-plots",
    ])
    assert rc == 0
    assert not (tmp_path / "m_loss.png").exists()


# ------------------------------------------------------------------ eval


def run_eval(workdir, path, extra):
    rc = main([
        "eval", *TINY, "--model", str(workdir["model"]), "--data", str(workdir["pack"]),
        "--tasks", "40", "--report", str(path), *extra,
    ])
    assert rc == 0
    return json.loads(path.read_text())


def test_eval_reports_are_seed_reproducible(workdir, tmp_path, capsys):
    r1 = run_eval(workdir, tmp_path / "r1.json", ["--seed", "11"])
    r2 = run_eval(workdir, tmp_path / "r2.json", ["--seed", "11"])
    r4 = run_eval(workdir, tmp_path / "r4.json", ["--seed", "11", "--workers", "4"])
    other = run_eval(workdir, tmp_path / "r5.json", ["--seed", "12"])
    assert r1["bitmap_hex"] == r2["bitmap_hex"] == r4["bitmap_hex"]
    assert r1["accuracy"] == r2["accuracy"] == r4["accuracy"]
    assert other["bitmap_hex"] != r1["bitmap_hex"]
    assert "sact: accuracy" in capsys.readouterr().out


def test_eval_report_schema(workdir, tmp_path):
    rep = run_eval(workdir, tmp_path / "r.json", ["--seed", "11"])
    assert set(rep) == {
        "accuracy", "ci95", "n_tasks", "n_query", "seed", "model_kind",
        "bitmap_hex", "wall_clock_s", "config",
    }
    assert rep["n_tasks"] == 40 and rep["seed"] == 11 and rep["model_kind"] == "sact"
    assert len(rep["bitmap_hex"]) == 10  # 40 bits -> 5 bytes
    assert rep["config"]["model"]["embed_dim"] == 5


def test_eval_baseline_needs_no_model(tmp_path, capsys):
    report = tmp_path / "pn.json"
    rc = main(["eval", *TINY, "--pn", "--synthetic", "--tasks", "30",
               "--report", str(report)])
    assert rc == 0
    assert json.loads(report.read_text())["model_kind"] == "pn_fsar"
    assert "pn_fsar: accuracy" in capsys.readouterr().out


def test_eval_argument_errors(workdir, tmp_path, capsys):
    assert main(["eval", *TINY, "--data", str(workdir["pack"])]) == 2
    assert "--model MODEL.json or --pn" in capsys.readouterr().err
    assert main(["eval", *TINY, "--pn"]) == 2
    assert "data source is required" in capsys.readouterr().err
    missing = tmp_path / "missing.json"
    assert main(["eval", *TINY, "--model", str(missing), "--data", str(workdir["pack"])]) == 3


# ------------------------------------------------------------ data errors


def test_missing_pack_exits_3(tmp_path, capsys):
    rc = main(["train", *TINY, "--data", str(tmp_path / "nope.fpk"),
               "--out", str(tmp_path / "m.json")])
    assert rc == 3
    assert "data error" in capsys.readouterr().err


def test_truncated_pack_exits_3(workdir, tmp_path, capsys):
    clipped = tmp_path / "clipped.fpk"
    clipped.write_bytes(workdir["pack"].read_bytes()[:-10])
    rc = main(["train", *TINY, "--data", str(clipped), "--out", str(tmp_path / "m.json")])
    assert rc == 3
    assert "data error" in capsys.readouterr().err


# ---------------------------------------------------------- config layers


def test_config_file_env_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("frames = 8  # file wins over the default\nchannels = 6\n")
    base = ["gen", "--patches", "2", "--classes", "3", "--videos-per-class", "4",
            "--object-dim", "2"]

    out = tmp_path / "from_file.fpk"
    assert main([*base, "--config", str(cfg), "--out", str(out)]) == 0
    assert read_feature_pack(out).shape == (8, 4, 6)

    os.environ["SACT_CONFIG"] = str(cfg)
    try:
        out2 = tmp_path / "from_env.fpk"
        assert main([*base, "--out", str(out2)]) == 0
        assert read_feature_pack(out2).shape == (8, 4, 6)
    finally:
        del os.environ["SACT_CONFIG"]

    out3 = tmp_path / "flag_wins.fpk"
    assert main([*base, "--config", str(cfg), "--frames", "4", "--out", str(out3)]) == 0
    assert read_feature_pack(out3).shape == (4, 4, 6)

    out4 = tmp_path / "spec_alias.fpk"
    assert main([*base, "--spec", str(cfg), "--out", str(out4)]) == 0
    assert out4.read_bytes() == out.read_bytes()  # --spec is an alias for --config


def test_config_file_errors_exit_2(tmp_path, capsys):
    bad_key = tmp_path / "bad_key.cfg"
    bad_key.write_text("bogus = 1\n")
    assert main(["gen", *TINY, "--config", str(bad_key), "--out", str(tmp_path / "x.fpk")]) == 2
    assert "unknown config key" in capsys.readouterr().err

    bad_value = tmp_path / "bad_value.cfg"
    bad_value.write_text("frames = abc\n")
    assert main(["gen", *TINY, "--config", str(bad_value), "--out", str(tmp_path / "x.fpk")]) == 2
    assert "cannot parse" in capsys.readouterr().err

    bad_choice = tmp_path / "bad_choice.cfg"
    bad_choice.write_text("spatial_jitter = diagonal\n")
    assert main(["gen", *TINY, "--config", str(bad_choice), "--out", str(tmp_path / "x.fpk")]) == 2

    assert main(["gen", *TINY, "--config", str(tmp_path / "ghost.cfg"),
                 "--out", str(tmp_path / "x.fpk")]) == 2
    assert "cannot read config file" in capsys.readouterr().err


# ------------------------------------------------------------- gradcheck


def test_gradcheck_command_covers_all_flag_combinations(capsys):
    assert main(["gradcheck"]) == 0
    text = capsys.readouterr().out
    assert text.count("[PASS]") == 8
    assert "worst over all combinations" in text


# ------------------------------------------------------------------ cost


def test_cost_report_json_matches_the_library(tmp_path, capsys):
    out = tmp_path / "cost.json"
    rc = main(["cost", "--frames", "8", "--patches", "7", "--channels", "32",
               "--dk", "64", "--dv", "64", "--way", "5", "--shot", "1",
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    direct = count_multiadds(
        ModelConfig(frames=8, patch_rows=7, channels=32, embed_dim=64, value_dim=64),
        way=5, shot=1,
    )
    assert payload == json.loads(json.dumps(direct.to_jsonable()))
    assert "total without reduction" in capsys.readouterr().out


def test_cost_reference_sweep_outputs(tmp_path, capsys):
    rc = main(["cost", "--sweep-reference", "--out-dir", str(tmp_path)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "reference sweep verdict: no single attention width" in text
    assert "closest 8-frame match: dk=87 at 0.34% deviation" in text
    assert "mixer note" in text
    with open(tmp_path / "reference_sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 249  # dk 8..256
    assert rows[0]["dk"] == "8" and rows[-1]["dk"] == "256"


# ---------------------------------------------------------------- ablate


def test_ablate_exponent_sweep(tmp_path, capsys):
    rc = main(["ablate", "--sweep", "exponent", *TINY,
               "--train-tasks", "4", "--eval-tasks", "10", "--out-dir", str(tmp_path)])
    assert rc == 0
    with open(tmp_path / "sweep_exponent.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["exponent"] for r in rows] == ["1", "2"]
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)
    assert (tmp_path / "sweep_exponent.png").stat().st_size > 0
    assert "exponent sweep: 2 rows" in capsys.readouterr().out


def test_ablate_patches_sweep_covers_the_grid_sizes(tmp_path):
    rc = main(["ablate", "--sweep", "patches", *TINY, "--no-plots",
               "--train-tasks", "3", "--eval-tasks", "8", "--out-dir", str(tmp_path)])
    assert rc == 0
    with open(tmp_path / "sweep_patches.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["patches"] for r in rows] == [str(p) for p in range(1, 8)]


def test_ablate_tmixer_runs_both_datasets(tmp_path):
    # no --classes: the order-pair arm clamps itself to the 8-frame maximum
    rc = main(["ablate", "--sweep", "tmixer", "--frames", "8", "--patches", "2",
               "--channels", "6", "--dk", "5", "--dv", "5", "--object-dim", "4",
               "--videos-per-class", "6", "--way", "3", "--no-plots",
               "--train-tasks", "3", "--eval-tasks", "8", "--out-dir", str(tmp_path)])
    assert rc == 0
    with open(tmp_path / "sweep_tmixer.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["dataset"], r["tmixer"]) for r in rows] == [
        ("spatial", "on"), ("spatial", "off"), ("order-pair", "on"), ("order-pair", "off"),
    ]


# ------------------------------------------------------------------ attn


def test_attn_exports_unit_mass_rows_and_planted_positions(workdir, tmp_path):
    out = tmp_path / "attn"
    rc = main(["attn", *TINY, "--model", str(workdir["model"]), "--synthetic",
               "--episode-seed", "77", "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["episode_seed"] == 77
    assert len(manifest["files"]) == 3  # one matrix per episode class
    assert manifest["true_class_id"] in map(int, manifest["files"])

    for class_id, name in manifest["files"].items():
        with open(out / name, newline="") as fh:
            data = list(csv.reader(fh))
        mat = np.array(data[1:], dtype=np.float64)
        assert mat.shape == (4, 4)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-6)
        assert manifest["row_argmax"][class_id] == np.argmax(mat, axis=1).tolist()

    planted = manifest["planted_positions"]
    assert planted["query"] is not None
    assert sorted(planted["support"]) == sorted(manifest["files"])
    assert (out / "attention.png").stat().st_size > 0


def test_attn_downsample_pools_to_a_coarser_grid(workdir, tmp_path):
    out = tmp_path / "pooled"
    rc = main(["attn", *TINY, "--model", str(workdir["model"]), "--synthetic",
               "--episode-seed", "77", "--downsample", "1", "--out", str(out),
               "--no-plots"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    name = next(iter(manifest["files"].values()))
    with open(out / name, newline="") as fh:
        data = list(csv.reader(fh))
    assert len(data) == 2  # header plus the single pooled row
    assert float(data[1][0]) == pytest.approx(1.0, abs=1e-6)


def test_attn_rejects_downsample_beyond_the_grid(workdir, capsys, tmp_path):
    rc = main(["attn", *TINY, "--model", str(workdir["model"]), "--synthetic",
               "--downsample", "3", "--out", str(tmp_path / "x"), "--no-plots"])
    assert rc == 2
    assert "exceeds the patch grid side" in capsys.readouterr().err


def test_pool_attention_matrix_preserves_row_mass():
    rng = np.random.default_rng(0)
    raw = rng.random((9, 9))
    raw /= raw.sum(axis=1, keepdims=True)
    pooled = pool_attention_matrix(raw, patch_rows=3, group_rows=2)
    assert pooled.shape == (4, 4)
    np.testing.assert_allclose(pooled.sum(axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------- packaging


def test_module_entry_point_shows_usage():
    proc = subprocess.run(
        [sys.executable, "-m", "sact", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    for command in ("gen", "train", "eval", "ablate", "attn", "gradcheck", "cost"):
        assert command in proc.stdout


@pytest.mark.skipif(shutil.which("sact") is None, reason="console script not on PATH")
def test_console_script_shows_usage():
    proc = subprocess.run(["sact", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "spatial cross-attention" in proc.stdout
