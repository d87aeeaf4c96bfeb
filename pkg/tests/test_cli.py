from __future__ import annotations

import json

import numpy as np
import pytest

from facedeblur.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, colorize_labels, main
from facedeblur.config import RunConfig
from facedeblur.dataset import load_image, read_manifest, save_image


def run(*argv):
    return main([str(a) for a in argv])


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        run("dataset-gen", "--help")
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--seed", "--profile", "--config", "--sigma", "--boundary", "--split", "--exclude-kernels"):
        assert flag in out
    assert f"default: {RunConfig().degradation.noise_sigma}" in out
    assert "default: replicate" in out
    for cmd in ("kernel-gen", "train", "eval", "infer"):
        with pytest.raises(SystemExit):
            run(cmd, "--help")
        assert "default" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("kernel-gen")
    assert exc.value.code == EXIT_USAGE
    assert run("kernel-gen", "--out", "x", "--sizes", "12") == EXIT_USAGE


def test_kernel_gen(tmp_path):
    assert run("kernel-gen", "--sizes", "13", "--per-size", "2", "--seed", "1", "--out", tmp_path / "d") == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "d/13").iterdir()) == [
        "k13_00000.json", "k13_00000.npy", "k13_00001.json", "k13_00001.npy"]


def test_global_flags_before_or_after_command(tmp_path):
    run("--seed", "4", "kernel-gen", "--sizes", "5", "--per-size", "1", "--out", tmp_path / "a")
    run("kernel-gen", "--seed", "4", "--sizes", "5", "--per-size", "1", "--out", tmp_path / "b")
    assert (tmp_path / "a/5/k5_00000.npy").read_bytes() == (tmp_path / "b/5/k5_00000.npy").read_bytes()


def test_missing_label_dir_named(tmp_path, capsys):
    run("--profile", "tiny", "faces-gen", "--count", "1", "--out", tmp_path / "f")
    run("kernel-gen", "--sizes", "5", "--per-size", "1", "--out", tmp_path / "k")
    code = run("dataset-gen", "--clear", tmp_path / "f/clear", "--labels", tmp_path / "missing",
               "--kernels", tmp_path / "k", "--out", tmp_path / "ds")
    assert code == EXIT_RUNTIME
    assert str(tmp_path / "missing") in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """faces -> kernels -> manifests -> a short tiny training run."""
    root = tmp_path_factory.mktemp("pipe")
    assert run("--profile", "tiny", "faces-gen", "--count", "2", "--out", root / "faces") == EXIT_OK
    assert run("kernel-gen", "--sizes", "5,7", "--per-size", "1", "--seed", "1", "--out", root / "ktrain") == EXIT_OK
    assert run("kernel-gen", "--sizes", "5,7", "--per-size", "1", "--seed", "2", "--out", root / "ktest") == EXIT_OK
    for split, kdir, other in (("train", "ktrain", "ktest"), ("test", "ktest", "ktrain")):
        assert run("dataset-gen", "--clear", root / "faces/clear", "--labels", root / "faces/labels",
                   "--kernels", root / kdir, "--exclude-kernels", root / other, "--split", split,
                   "--sigma", "0.01", "--out", root / split) == EXIT_OK
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps({"profile": "tiny", "stage_iterations": {"1": 2, "2": 2, "3": 2, "4": 2}}))
    assert run("--config", cfg, "train", "--manifest", root / "train/manifest.jsonl", "--stage", "all",
               "--scale-factor", "1", "--out", root / "run") == EXIT_OK
    return root


def test_dataset_gen_outputs(pipeline):
    entries = read_manifest(pipeline / "train/manifest.jsonl")
    assert len(entries) == 4
    assert all((pipeline / "train" / e["blurred"]).exists() for e in entries)


def test_dataset_gen_rejects_shared_kernels(pipeline, capsys):
    code = run("dataset-gen", "--clear", pipeline / "faces/clear", "--labels", pipeline / "faces/labels",
               "--kernels", pipeline / "ktrain", "--exclude-kernels", pipeline / "ktrain",
               "--out", pipeline / "bad")
    assert code == EXIT_RUNTIME and "overlap" in capsys.readouterr().err


def test_train_writes_four_checkpoints(pipeline):
    names = sorted(p.name for p in (pipeline / "run").glob("*.ckpt"))
    assert names == ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "stage4.ckpt"]
    lines = (pipeline / "run/metrics.jsonl").read_text().splitlines()
    assert len(lines) == 8


def test_train_needs_one_data_source(tmp_path):
    assert run("--profile", "tiny", "train", "--out", tmp_path) == EXIT_USAGE


def test_train_synthetic_single_stage(tmp_path):
    code = run("--profile", "tiny", "train", "--synthetic", "2", "--stage", "1",
               "--scale-factor", "0.00002", "--out", tmp_path / "r")
    assert code == EXIT_OK
    assert [p.name for p in (tmp_path / "r").glob("*.ckpt")] == ["stage1.ckpt"]


def test_eval_writes_report(pipeline):
    assert run("eval", "--manifest", pipeline / "test/manifest.jsonl", "--ckpt", pipeline / "run/stage4.ckpt",
               "--out", pipeline / "report") == EXIT_OK
    payload = json.loads((pipeline / "report/report.json").read_text())
    assert payload["aggregates"]["overall"]["count"] == 4
    assert set(payload["aggregates"]["by_kernel_size"]) == {"5", "7"}


def test_infer_pads_odd_input_and_is_deterministic(pipeline, tmp_path):
    img = np.random.default_rng(0).random((25, 27, 3))
    save_image(tmp_path / "in.png", img)
    ckpt = pipeline / "run/stage4.ckpt"
    assert run("infer", tmp_path / "in.png", "--ckpt", ckpt, "--out", tmp_path / "a.png",
               "--dump-parsing", tmp_path / "p.png") == EXIT_OK
    assert run("infer", tmp_path / "in.png", "--ckpt", ckpt, "--out", tmp_path / "b.png") == EXIT_OK
    assert load_image(tmp_path / "a.png").shape == (25, 27, 3)
    assert load_image(tmp_path / "p.png").shape == (25, 27, 3)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_infer_missing_checkpoint(tmp_path):
    save_image(tmp_path / "in.png", np.zeros((8, 8, 3)))
    assert run("infer", tmp_path / "in.png", "--ckpt", tmp_path / "nope.ckpt", "--out", tmp_path / "o.png") == EXIT_RUNTIME


def test_colorize_distinct_colors():
    colors = colorize_labels(np.arange(11).reshape(1, 11), 11)[0]
    assert len({tuple(np.round(c, 6)) for c in colors}) == 11
    assert np.array_equal(colors[0], [0, 0, 0])


def test_parser_profile_choices():
    args = build_parser().parse_args(["--profile", "tiny", "eval", "--manifest", "m", "--out", "o"])
    assert args.profile == "tiny" and args.ckpt is None
