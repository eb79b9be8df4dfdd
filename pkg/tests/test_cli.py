import json

import numpy as np
import pytest

from sptlsa import cli
from sptlsa.checkpoint import load_checkpoint
from sptlsa.data import write_cifar10_file
from sptlsa.experiments import RunManifest, read_csv

TINY = {"model": {"depth": 1, "hidden_dim": 16, "heads": 2},
        "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16}}


@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cifar")
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar10_file(root / name, rng.integers(0, 256, (6, 32, 32, 3), dtype=np.uint8), rng.integers(0, 10, 6))
    return root


@pytest.fixture()
def manifest(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_rf_prints_16(capsys):
    assert run("rf", "--rtrans", 1, "--stride", 16, "--kernel", 16) == 0
    assert capsys.readouterr().out.strip() == "16"


def test_usage_errors_exit_1(capsys):
    assert run("rf", "--rtrans", 1) == 1
    assert run("bogus") == 1
    assert run() == 1
    assert run("rf", "--rtrans", 0, "--stride", 1, "--kernel", 1) == 1


def test_help_exits_0():
    assert run("--help") == 0


def test_train_eval_diagnose_attn_map(tmp_path, cifar_dir, manifest, capsys):
    out = tmp_path / "run"
    common = ["--dataset", cifar_dir, "--allow-partial"]
    assert run("train", "--config", manifest, "--variant", "SL-ViT", "--out", out, *common) == 0
    printed = capsys.readouterr().out
    assert "checkpoint" in printed and "top1" in printed
    for name in ("manifest.json", "metrics.csv", "checkpoint.bin"):
        assert (out / name).exists()
    saved = RunManifest.load(out / "manifest.json")
    assert saved.model.use_spt and saved.dataset["kind"] == "cifar10-binary"
    assert (out / "manifest.json").read_text() == saved.to_json()
    assert load_checkpoint(out / "checkpoint.bin").config == saved.model

    assert run("eval", "--checkpoint", out / "checkpoint.bin", *common) == 0
    assert 0.0 <= float(capsys.readouterr().out) <= 1.0

    assert run("diagnose", "--config", manifest, "--checkpoint", out / "checkpoint.bin", "--samples", 4,
               "--out", out, *common) == 0
    rows = read_csv(out / "diagnostics.csv")
    assert len(rows) == 1 and rows[0]["learnable"] == "1"

    assert run("attn-map", "--checkpoint", out / "checkpoint.bin", "--index", 2, "--out", out, *common) == 0
    assert (out / "attn_map_2.pgm").read_bytes().startswith(b"P5\n4 4\n255\n")
    assert run("attn-map", "--checkpoint", out / "checkpoint.bin", "--index", 99, "--out", out, *common) == 1


def test_train_twice_identical(tmp_path, cifar_dir, manifest, capsys):
    args = ["--config", manifest, "--dataset", cifar_dir, "--allow-partial", "--seed", 3]
    assert run("train", *args, "--out", tmp_path / "a") == 0
    assert run("train", *args, "--out", tmp_path / "b") == 0
    for f in ("manifest.json", "metrics.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_data_errors_exit_2(tmp_path, cifar_dir, manifest):
    assert run("train", "--config", manifest, "--dataset", tmp_path / "missing", "--out", tmp_path) == 2
    assert run("train", "--config", manifest, "--dataset", cifar_dir, "--out", tmp_path) == 2  # counts
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 100)
    assert run("train", "--config", manifest, "--dataset", bad, "--out", tmp_path) == 2
    ckpt = tmp_path / "c.bin"
    ckpt.write_bytes(b"nope")
    assert run("eval", "--checkpoint", ckpt, "--dataset", cifar_dir, "--allow-partial") == 2


def test_config_errors_exit_1(tmp_path, cifar_dir):
    bad = tmp_path / "m.json"
    bad.write_text("{not json")
    assert run("train", "--config", bad, "--dataset", cifar_dir, "--allow-partial", "--out", tmp_path) == 1
    bad.write_text(json.dumps({"model": {"hidden_dim": 10, "heads": 4}}))
    assert run("train", "--config", bad, "--dataset", cifar_dir, "--allow-partial", "--out", tmp_path) == 1
    bad.write_text(json.dumps({"mystery": 1}))
    assert run("gradcheck", "--config", bad) == 1


def test_ablate_rows(tmp_path, cifar_dir, manifest):
    assert run("ablate", "--config", manifest, "--dataset", cifar_dir, "--allow-partial", "--variants",
               "ViT,SL-ViT", "--seeds", "0,1", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert [r["model"] for r in rows] == ["ViT", "SL-ViT"]
    assert set(rows[0]) == {"model", "mean_top1", "top1_seed0", "top1_seed1"}
    assert run("ablate", "--config", manifest, "--dataset", cifar_dir, "--allow-partial", "--variants", "Q-ViT",
               "--out", tmp_path) == 1


def test_sweeps(tmp_path, cifar_dir, manifest):
    one_epoch = tmp_path / "one.json"
    one_epoch.write_text(json.dumps({**TINY, "train": {"epochs": 1, "warmup_epochs": 0, "batch_size": 32}}))
    common = ["--config", one_epoch, "--dataset", cifar_dir, "--allow-partial", "--out", tmp_path]
    assert run("sweep-temp", *common) == 0
    rows = read_csv(tmp_path / "temperature_sweep.csv")
    assert [float(r["multiplier"]) for r in rows] == [0.25, 0.5, 1.0, 2.0, 4.0]
    assert [float(r["temperature"]) for r in rows] == [m * 8 ** 0.5 for m in (0.25, 0.5, 1, 2, 4)]
    assert run("sweep-shift", *common, "--presets", "cardinal4,diagonal4", "--ratios", "0.25,0.5") == 0
    rows = read_csv(tmp_path / "shift_sweep.csv")
    assert [(r["directions"], r["shift_px"]) for r in rows] == [
        ("cardinal4", "2"), ("cardinal4", "4"), ("diagonal4", "2"), ("diagonal4", "4")]


def test_gradcheck_passes(manifest, capsys):
    assert run("gradcheck", "--config", manifest, "--seeds", 1, "--coords", 3, "--variant", "SL-ViT") == 0
    assert "PASS" in capsys.readouterr().out


def test_threads_env_overrides(monkeypatch):
    args = cli.build_parser().parse_args(["gradcheck", "--threads", "3"])
    assert cli._threads(args) == 3
    monkeypatch.setenv("SPTLSA_THREADS", "2")
    assert cli._threads(args) == 2
