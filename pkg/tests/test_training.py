from __future__ import annotations

import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from facedeblur.checkpoint import load_checkpoint, param_key, save_checkpoint
from facedeblur.config import load_config, profile_config
from facedeblur.dataset import batch_iterator
from facedeblur.losses import STAGE_TERMS
from facedeblur.networks import SUBNETS
from facedeblur.synthetic import micro_dataset
from facedeblur.training import (
    PAPER_ITERATIONS,
    OptimConfig,
    StageSpec,
    TrainingDiverged,
    adversarial_step,
    default_schedule,
    discriminator_step,
    evaluate_stage_loss,
    params_hash,
    run_full_schedule,
    to_tensors,
    train_stage,
    train_step,
)


@pytest.fixture(scope="module")
def micro(tiny_cfg):
    return micro_dataset(4, tiny_cfg.image_size, tiny_cfg.kernel_sizes, seed=0)


def _data(ds, cfg, seed=0):
    return batch_iterator(ds, cfg.optim.batch_size, seed=seed)


def _spec(stage, n):
    s = default_schedule()[stage - 1]
    return replace(s, iterations=n)


def _subnet_hashes(model):
    return {name: params_hash(model.subnet(name)) for name in SUBNETS}


# -- schedule ----------------------------------------------------------------------


def test_schedule_matches_progressive_strategy():
    sched = default_schedule()
    assert [s.iterations for s in sched] == [200_000, 60_000, 200_000, 100_000]
    assert [s.trainable for s in sched] == [("coarse",), ("parser",), ("fine", "disc"), SUBNETS]
    assert all(s.active_losses == STAGE_TERMS[s.id] for s in sched)


def test_tiny_scale_factor_iterations(tiny_cfg):
    assert [s.iterations for s in tiny_cfg.schedule()] == [50, 15, 50, 25]
    assert [s.iterations for s in default_schedule(0.0005)] == [100, 30, 100, 50]


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(lr_deblur=-1)
    with pytest.raises(ValueError):
        OptimConfig(optimizer="lbfgs")
    assert OptimConfig().lr_for("parser") == 5e-6 and OptimConfig().lr_for("fine") == 4e-5


# -- freeze contract ---------------------------------------------------------------


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_frozen_subnets_bit_identical(tiny_cfg, micro, stage):
    state = tiny_cfg.make_state()
    before = _subnet_hashes(state.model)
    spec = _spec(stage, 3)
    train_stage(state, spec, _data(micro, tiny_cfg))
    after = _subnet_hashes(state.model)
    for name in SUBNETS:
        if name in spec.trainable:
            assert before[name] != after[name], name
        else:
            assert before[name] == after[name], name


def test_zero_learning_rate_changes_nothing(tiny_cfg, micro):
    cfg = replace(tiny_cfg, optim=replace(tiny_cfg.optim, lr_deblur=0.0, lr_parsing=0.0, lr_disc=0.0))
    state = cfg.make_state()
    before = params_hash(state.model)
    for stage in (1, 2, 3, 4):
        train_stage(state, _spec(stage, 2), _data(micro, cfg))
    assert params_hash(state.model) == before


# -- adversarial -------------------------------------------------------------------


def test_discriminator_learns_fixed_batch(tiny_cfg, micro):
    state = tiny_cfg.make_state()
    from facedeblur.training import make_optimizers

    state.optimizers = make_optimizers(state.model, state.optim, ("disc",))
    x, y_gt, _ = to_tensors(next(_data(micro, tiny_cfg)))
    with torch.no_grad():
        fake = state.model(x)["y"].clamp(0, 1)
        d_real0, d_fake0 = state.model.disc(y_gt).mean().item(), state.model.disc(fake).mean().item()
    g_before = params_hash(state.model.fine)
    for _ in range(50):
        discriminator_step(state, y_gt, fake)
    with torch.no_grad():
        d_real1, d_fake1 = state.model.disc(y_gt).mean().item(), state.model.disc(fake).mean().item()
    assert (d_real1 - d_fake1) > (d_real0 - d_fake0) + 0.1
    assert params_hash(state.model.fine) == g_before


def test_zero_adversarial_weight_decouples_generator(tiny_cfg, micro):
    cfg = replace(tiny_cfg, weights=replace(tiny_cfg.weights, lambda_adv=0.0))
    with_d, without_d = cfg.make_state(), cfg.make_state()
    train_stage(with_d, _spec(3, 4), _data(micro, cfg))
    train_stage(without_d, StageSpec(3, ("fine",), STAGE_TERMS[3], 4), _data(micro, cfg))
    assert params_hash(with_d.model.fine) == params_hash(without_d.model.fine)
    assert params_hash(with_d.model.disc) != params_hash(without_d.model.disc)


def test_adversarial_step_records(tiny_cfg, micro):
    state = tiny_cfg.make_state()
    from facedeblur.training import make_optimizers

    state.optimizers = make_optimizers(state.model, state.optim)
    rec = adversarial_step(state, to_tensors(next(_data(micro, tiny_cfg))))
    assert rec["stage"] == 3 and rec["L_adv_D"] is not None and rec["L_adv_G"] is not None
    with pytest.raises(ValueError):
        adversarial_step(state, to_tensors(next(_data(micro, tiny_cfg))), _spec(1, 1))


def test_zero_discriminator_start_values(tiny_cfg, micro):
    state = tiny_cfg.make_state()
    for p in state.model.disc.parameters():
        torch.nn.init.zeros_(p)
    from facedeblur.training import make_optimizers

    state.optimizers = make_optimizers(state.model, state.optim)
    x, y_gt, labels = to_tensors(next(_data(micro, tiny_cfg)))
    rec = train_step(state, (x, y_gt, labels), _spec(3, 1))
    assert rec["L_adv_D"] == pytest.approx(2 * np.log(2), rel=1e-6)


# -- descent and divergence --------------------------------------------------------


def test_single_step_descent(tiny_cfg, micro):
    """On a fixed batch one small Adam step rarely increases the stage-1 loss."""
    cfg = replace(tiny_cfg, optim=replace(tiny_cfg.optim, lr_deblur=1e-5))
    raw = next(_data(micro, cfg))
    batch = to_tensors(raw)
    ok = 0
    for trial in range(100):
        state = replace(cfg, seed=trial).make_state()
        before = evaluate_stage_loss(state, batch, 1)
        train_stage(state, _spec(1, 1), itertools.repeat(raw))
        ok += evaluate_stage_loss(state, batch, 1) <= before
    assert ok >= 95


def test_nan_aborts_with_snapshot(tiny_cfg, micro, tmp_path):
    state = tiny_cfg.make_state()
    with torch.no_grad():
        state.model.coarse.scale2.tail.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train_stage(state, _spec(1, 1), _data(micro, tiny_cfg), run_dir=tmp_path)
    snap = json.loads((tmp_path / "nan_snapshot.json").read_text())
    assert snap["stage"] == 1 and len(snap["params_sha256"]) == 64
    assert set(np.load(tmp_path / "nan_snapshot.npz")) == {"blurred", "clear", "labels"}


def test_records_have_all_fields(tiny_cfg, micro):
    state = tiny_cfg.make_state()
    _, recs = train_stage(state, _spec(4, 1), _data(micro, tiny_cfg))
    assert set(recs[0]) == {"iter", "stage", "L_c", "L_s", "L_p", "L_vgg", "L_adv_G", "L_adv_D", "total"}
    assert all(v is not None for v in recs[0].values())


# -- checkpoints and full runs -----------------------------------------------------


def test_param_key_layout():
    assert param_key("coarse.scale1.head.weight") == "coarse/scale1.head/weight"
    assert param_key("fine.0.scale2.body.3.conv1.bias") == "fine/0.scale2.body.3.conv1/bias"


def test_checkpoint_roundtrip_bit_exact(tiny_cfg, micro, tmp_path):
    state = tiny_cfg.make_state()
    train_stage(state, _spec(1, 2), _data(micro, tiny_cfg))
    save_checkpoint(tmp_path / "a.ckpt", state, tiny_cfg)
    loaded, cfg = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg == tiny_cfg and loaded.stage == 1 and loaded.iteration == 2
    x = torch.rand(2, 3, 32, 32)
    state.model.eval()
    loaded.model.eval()
    with torch.no_grad():
        a, b = state.model(x), loaded.model(x)
    assert all(torch.equal(a[k], b[k]) for k in a)
    save_checkpoint(tmp_path / "b.ckpt", loaded, cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_files(tmp_path, tiny_cfg):
    import zipfile

    with zipfile.ZipFile(tmp_path / "x.ckpt", "w") as zf:
        zf.writestr("hello.txt", "hi")
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(tmp_path / "x.ckpt")
    state = profile_config("tiny").make_state()
    save_checkpoint(tmp_path / "t.ckpt", state, tiny_cfg)
    wide = replace(tiny_cfg, deblur=replace(tiny_cfg.deblur, base_channels=4))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(tmp_path / "t.ckpt", wide)


def test_full_schedule_and_resume(tiny_cfg, micro, tmp_path):
    cfg = replace(tiny_cfg, stage_iterations={1: 4, 2: 2, 3: 4, 4: 2}, scale_factor=1.0)
    state, written = run_full_schedule(cfg, micro, tmp_path / "run", stages=(1, 2, 3))
    assert [p.name for p in written] == ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt"]
    batch = to_tensors(next(_data(micro, cfg, seed=99)))
    in_memory = evaluate_stage_loss(state, batch, 4)
    resumed, _ = load_checkpoint(tmp_path / "run/stage3.ckpt")
    assert abs(evaluate_stage_loss(resumed, batch, 4) - in_memory) <= 1e-6
    _, more = run_full_schedule(cfg, micro, tmp_path / "run", resume=tmp_path / "run/stage3.ckpt")
    assert [p.name for p in more] == ["stage4.ckpt"]
    lines = (tmp_path / "run/metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 + 2 + 4 + 2
    assert json.loads(lines[-1])["stage"] == 4


def test_config_json_roundtrip(tmp_path, tiny_cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_cfg.to_dict()))
    assert load_config(path) == tiny_cfg
    path.write_text(json.dumps({"profile": "tiny", "weights": {"lambda_s": 2.0}, "seed": 3}))
    cfg = load_config(path)
    assert cfg.weights.lambda_s == 2.0 and cfg.seed == 3 and cfg.image_size == 32
    assert load_config(path, seed=5).seed == 5
    path.write_text(json.dumps({"profile": "tiny", "stage_iterations": {"3": 400000}}))
    assert [s.iterations for s in load_config(path).schedule()] == [50, 15, 100, 25]
    path.write_text(json.dumps({"weights": {"lambda_q": 1}}))
    with pytest.raises(ValueError, match="lambda_q"):
        load_config(path)


def test_paper_profile_values():
    cfg = profile_config("paper")
    assert cfg.image_size == 128 and cfg.kernel_sizes == tuple(range(13, 28, 2))
    w = cfg.weights
    assert (w.lambda_s, w.lambda_p, w.lambda_vgg, w.lambda_adv, w.c) == (50, 1e-4, 1e-5, 5e-5, 1)
    o = cfg.optim
    assert (o.batch_size, o.lr_parsing, o.lr_deblur) == (16, 5e-6, 4e-5)
    assert cfg.stage_iterations == PAPER_ITERATIONS
    d = cfg.deblur
    assert (d.resblocks_per_scale, d.base_channels, d.first_kernel, d.other_kernel) == (6, 64, 11, 5)
    assert cfg.degradation.noise_sigma == 0.01
    with pytest.raises(ValueError):
        profile_config("huge")
