import csv
import json

import pytest

from pixalign.cli import RUN_ROOT_ENV, main

TINY_TOML = """\
[model]
image_size = 8
patch_size = 2
depth = 2
hidden_dim = 16
heads = 2
num_classes = 3
in_context_tokens = 2
in_context_start_block = 2

[train]
steps = 4
batch_size = 4
checkpoint_every = 2

[alignment]
variant = "mta"
feature_dim = 8

[data]
kind = "shapes"
num_classes = 3
per_class = 4
image_size = 8

[sampler]
steps = 3

[analysis]
seeds = [0]
samples_per_class = 2
"""


@pytest.fixture
def cfg_file(tmp_path, monkeypatch):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path / "runs"))
    p = tmp_path / "run.toml"
    p.write_text(TINY_TOML)
    return p


def test_dry_run_prints_canonical(cfg_file, capsys):
    assert main(["train", "--config", str(cfg_file), "--dry-run", "--set", "alignment.variant=mlp"]) == 0
    out = capsys.readouterr().out
    assert 'variant = "mlp"' in out and "config_hash" in out
    assert not (cfg_file.parent / "runs").exists()


def test_invalid_config_exit_code_and_line(cfg_file, capsys):
    cfg_file.write_text(TINY_TOML.replace("depth = 2", "depth = 2\ndepht = 3"))
    assert main(["train", "--config", str(cfg_file)]) == 1
    assert "line 5" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["make-dataset", "blobs", "x"]) == 1


def test_train_layout_and_reproducibility(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--run-dir", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg_file), "--run-dir", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert {p.name for p in a.iterdir()} >= {"config.canonical", "metrics.jsonl", "checkpoints", "samples", "reports"}
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "samples/final.f32").read_bytes() == (b / "samples/final.f32").read_bytes()
    assert sorted(p.name for p in (a / "checkpoints").iterdir()) == ["last.ckpt", "step_0000002.ckpt",
                                                                     "step_0000004.ckpt"]
    assert len((a / "metrics.jsonl").read_text().splitlines()) == 4


def test_default_run_root_from_environment(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--no-sample"]) == 0
    runs = list((tmp_path / "runs").iterdir())
    assert len(runs) == 1 and (runs[0] / "config.canonical").exists()


def test_sample_command(cfg_file, tmp_path, capsys):
    main(["train", "--config", str(cfg_file), "--run-dir", str(tmp_path / "r"), "--no-sample"])
    ckpt = str(tmp_path / "r/checkpoints/last.ckpt")
    for out in ("s1", "s2"):
        assert main(["sample", ckpt, "--steps", "3", "--seed", "5", "--classes", "0,2", "--out", str(tmp_path / out)]) == 0
    png = lambda d: (tmp_path / d / "samples_seed5.png").read_bytes()
    assert png("s1") == png("s2")
    side = json.loads((tmp_path / "s1/samples_seed5.json").read_text())
    assert side["shape"] == [2, 3, 8, 8] and side["config"]["guidance_interval"] == [0.1, 1.0]
    assert main(["sample", ckpt, "--steps", "3", "--ema", "none", "--out", str(tmp_path / "raw")]) == 0
    assert (tmp_path / "raw/samples_seed0.f32").read_bytes() != (tmp_path / "s1/samples_seed5.f32").read_bytes()
    assert main(["sample", str(tmp_path / "missing.ckpt")]) == 2
    assert main(["sample", ckpt, "--classes", "7"]) == 1


def test_sample_defaults():
    from pixalign.cli import build_parser
    args = build_parser().parse_args(["sample", "x.ckpt"])
    assert (args.steps, args.interval, args.w, args.ema) == (50, "0.1,1.0", 1.5, "0.9999")
    args = build_parser().parse_args(["analyze", "x", "--mode", "denoise-probe"])
    assert args.t0 == 0.2


def test_make_dataset_and_analyze(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert main(["make-dataset", "tightmode", str(ds), "--num-classes", "3", "--per-class", "6", "--image-size", "8",
                 "--features"]) == 0
    assert (ds / "manifest.json").exists() and (ds / "features/index.json").exists()
    rep = tmp_path / "rep"
    assert main(["analyze", str(ds), "--mode", "centroids", "--k", "2", "--out", str(rep)]) == 0
    rows = list(csv.DictReader(open(rep / "subsets.csv")))
    assert sorted({r["class_id"] for r in rows}) == ["0", "1", "2"]
    assert main(["analyze", str(ds), "--mode", "nonsense"]) == 1
    assert main(["analyze", str(tmp_path / "absent"), "--mode", "centroids"]) == 2


def test_analyze_probe_metrics_and_ablation(cfg_file, tmp_path):
    main(["train", "--config", str(cfg_file), "--run-dir", str(tmp_path / "r")])
    ds = tmp_path / "ds"
    main(["make-dataset", "shapes", str(ds), "--num-classes", "3", "--per-class", "4", "--image-size", "8"])
    rep = tmp_path / "rep"
    ckpt = str(tmp_path / "r/checkpoints/last.ckpt")
    assert main(["analyze", ckpt, "--mode", "denoise-probe", "--data", str(ds), "--k", "2", "--out", str(rep)]) == 0
    probe = [l for l in open(rep / "denoise_probe.csv") if not l.startswith("#")]
    assert probe[0].startswith("class_id,subset,t0") and ",0.2," in probe[1]
    assert main(["analyze", str(tmp_path / "r/samples/final.f32"), "--mode", "metrics", "--data", str(ds),
                 "--out", str(rep)]) == 0
    assert "frechet" in (rep / "metrics.csv").read_text()
    assert main(["analyze", ckpt, "--mode", "metrics", "--out", str(rep)]) == 1
    assert main(["analyze", str(cfg_file), "--mode", "ablate-mask", "--out", str(tmp_path / "abl")]) == 0
    wide = [l for l in open(tmp_path / "abl/ablation_wide.csv") if not l.startswith("#")]
    header = wide[0].strip().split(",")
    assert header == ["metric", "0.10", "0.20", "0.30", "0.40", "0.50"]
