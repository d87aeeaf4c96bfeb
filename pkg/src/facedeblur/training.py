"""Progressive four-stage training with freeze semantics and adversarial updates."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterator

import numpy as np
import torch

from .dataset import DEFAULT_SCHEMA, LabelSchema
from .losses import (
    STAGE_TERMS,
    FeatureExtractor,
    LossWeights,
    adversarial_losses,
    component_masks,
    content_loss,
    parsing_loss,
    perceptual_loss,
    structural_loss,
    total_loss,
)
from .networks import SUBNETS, FaceDeblurModel, downsample, downsample_labels

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

PAPER_ITERATIONS = {1: 200_000, 2: 60_000, 3: 200_000, 4: 100_000}


@dataclass(frozen=True)
class StageSpec:
    id: int
    trainable: tuple[str, ...]
    active_losses: tuple[str, ...]
    iterations: int


def default_schedule(scale_factor: float = 1.0, iterations: dict | None = None) -> list[StageSpec]:
    """The four progressive stages, with iteration counts scaled for desk runs."""
    base = iterations or PAPER_ITERATIONS
    trainable = {
        1: ("coarse",),
        2: ("parser",),
        3: ("fine", "disc"),
        4: ("coarse", "parser", "fine", "disc"),
    }
    return [
        StageSpec(s, trainable[s], STAGE_TERMS[s], max(1, int(round(base[s] * scale_factor))))
        for s in (1, 2, 3, 4)
    ]


@dataclass(frozen=True)
class OptimConfig:
    batch_size: int = 16
    lr_parsing: float = 5e-6
    lr_deblur: float = 4e-5
    lr_disc: float = 4e-5
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    # multiplier on every learning rate, per stage 1..4
    stage_lr_scale: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_parsing, self.lr_deblur, self.lr_disc) < 0:
            raise ValueError("learning rates must be non-negative")
        if len(self.stage_lr_scale) != 4 or min(self.stage_lr_scale) < 0:
            raise ValueError("stage_lr_scale needs four non-negative entries")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_for(self, subnet: str) -> float:
        return {"coarse": self.lr_deblur, "parser": self.lr_parsing, "fine": self.lr_deblur, "disc": self.lr_disc}[subnet]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    model: FaceDeblurModel
    optim: OptimConfig = OptimConfig()
    optimizers: dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    weights: LossWeights = LossWeights()
    stage: int = 0  # last completed stage
    iteration: int = 0
    schema: LabelSchema = DEFAULT_SCHEMA
    fx: torch.nn.Module = field(default_factory=FeatureExtractor)


def make_optimizers(
    model: FaceDeblurModel, optim: OptimConfig, subnets=SUBNETS, lr_scale: float = 1.0
) -> dict[str, torch.optim.Optimizer]:
    opts = {}
    for name in subnets:
        params = list(model.subnet(name).parameters())
        lr = optim.lr_for(name) * lr_scale
        if optim.optimizer == "adam":
            opts[name] = torch.optim.Adam(params, lr=lr, betas=optim.betas, foreach=False)
        else:
            opts[name] = torch.optim.SGD(params, lr=lr, foreach=False)
    return opts


def to_tensors(batch, dtype=torch.float32):
    """(blurred, clear, labels) numpy batch in NHWC -> NCHW tensors."""
    blurred, clear, labels = batch
    x = torch.as_tensor(np.ascontiguousarray(blurred), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    y_gt = torch.as_tensor(np.ascontiguousarray(clear), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    return x, y_gt, torch.as_tensor(np.asarray(labels), dtype=torch.long)


def params_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def compute_terms(state: TrainState, x, y_gt, labels, stage: int, adv: bool = True) -> tuple[dict, dict]:
    """Forward the cascade as far as ``stage`` needs and evaluate its loss terms.

    Returns ``(terms, outputs)``. The generator adversarial term is computed
    against the current discriminator unless ``adv`` is false.
    """
    model, w = state.model, state.weights
    terms: dict[str, torch.Tensor] = {}
    y_gt_half = downsample(y_gt)
    if stage == 1:
        out = model(x, upto="coarse")
        terms["L_c"] = content_loss(y_gt, y_c=out["y_c"], y_gt_half=y_gt_half, y_c_half=out["y_c_half"])
        return terms, out
    if stage == 2:
        out = model(x, upto="parser")
        terms["L_p"] = parsing_loss(out["p"], labels)
        return terms, out
    out = model(x)
    terms["L_c"] = content_loss(
        y_gt, y_c=out["y_c"], y=out["y"], y_gt_half=y_gt_half, y_c_half=out["y_c_half"], y_half=out["y_half"]
    )
    masks = component_masks(labels, state.schema)
    masks_half = component_masks(downsample_labels(labels), state.schema)
    terms["L_s"] = structural_loss(out["y"], y_gt, masks, w.structural_mode, w.c) + structural_loss(
        out["y_half"], y_gt_half, masks_half, w.structural_mode, w.c
    )
    terms["L_p"] = parsing_loss(out["p"], labels)
    terms["L_vgg"] = perceptual_loss(out["y"], y_gt, state.fx)
    if w.lambda_adv > 0 and adv:
        terms["L_adv"] = adversarial_losses(torch.ones_like(y_gt[:, 0, 0, 0]), model.disc(out["y"]))[1]
    else:
        terms["L_adv"] = y_gt.new_zeros(())
    return terms, out


def _set_trainable(model: FaceDeblurModel, trainable) -> None:
    for name in SUBNETS:
        model.subnet(name).requires_grad_(name in trainable)


def _check_finite(value: torch.Tensor, state: TrainState, batch, run_dir: Path | None, what: str) -> None:
    if torch.isfinite(value).all():
        return
    digest = params_hash(state.model)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        x, y_gt, labels = batch
        np.savez(run_dir / "nan_snapshot.npz", blurred=x.numpy(), clear=y_gt.numpy(), labels=labels.numpy())
        (run_dir / "nan_snapshot.json").write_text(
            json.dumps({"stage": state.stage + 1, "iteration": state.iteration, "params_sha256": digest, "term": what})
        )
    raise TrainingDiverged(
        f"non-finite {what} at iteration {state.iteration} (params sha256 {digest[:16]})"
    )


def discriminator_step(state: TrainState, y_gt: torch.Tensor, y_fake: torch.Tensor) -> float:
    """One update of D maximizing log D(real) + log(1 - D(fake))."""
    disc = state.model.disc
    opt = state.optimizers["disc"]
    opt.zero_grad(set_to_none=True)
    loss_d, _ = adversarial_losses(disc(y_gt), disc(y_fake.detach()))
    loss_d.backward()
    opt.step()
    return float(loss_d.detach())


def train_step(state: TrainState, batch, spec: StageSpec, run_dir: Path | None = None) -> dict:
    """One iteration of ``spec``; returns the metric record.

    Stages with D among the trainables alternate 1:1: the discriminator is
    updated on the current fakes first, then the generators against the
    updated discriminator.
    """
    x, y_gt, labels = batch
    model = state.model
    _set_trainable(model, spec.trainable)
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)

    adv = "disc" in spec.trainable
    loss_d = None
    if adv:
        # D update needs the current fakes; reuse this forward for the G update
        terms, out = compute_terms(state, x, y_gt, labels, spec.id, adv=False)
        loss_d = discriminator_step(state, y_gt, out["y"])
        _check_finite(torch.tensor(loss_d), state, batch, run_dir, "L_adv_D")
        if state.weights.lambda_adv > 0:
            model.disc.requires_grad_(False)
            terms["L_adv"] = adversarial_losses(torch.ones_like(y_gt[:, 0, 0, 0]), model.disc(out["y"]))[1]
    else:
        terms, out = compute_terms(state, x, y_gt, labels, spec.id)

    total, _ = total_loss(terms, state.weights, spec.id)
    _check_finite(total, state, batch, run_dir, "total loss")
    if total.requires_grad:
        total.backward()
    for name in spec.trainable:
        if name == "disc":
            continue
        state.optimizers[name].step()
    model.disc.requires_grad_(True)

    state.iteration += 1
    record = {"iter": state.iteration, "stage": spec.id}
    for key, term in (("L_c", "L_c"), ("L_s", "L_s"), ("L_p", "L_p"), ("L_vgg", "L_vgg"), ("L_adv_G", "L_adv")):
        record[key] = float(terms[term].detach()) if term in terms else None
    record["L_adv_D"] = loss_d
    record["total"] = float(total.detach())
    return record


def train_stage(
    state: TrainState,
    spec: StageSpec,
    data: Iterator,
    log: Callable[[dict], None] | None = None,
    run_dir: Path | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run ``spec.iterations`` steps; parameters outside ``spec.trainable`` stay bit-identical."""
    if spec.id > 1 and state.stage < spec.id - 1:
        logger.warning("stage %d started after stage %d; earlier stages were skipped", spec.id, state.stage)
    records = []
    # Fresh moment estimates per stage: gradient scales differ widely between
    # stages and stale second moments blow up the first joint steps.
    state.optimizers = make_optimizers(
        state.model, state.optim, spec.trainable, state.optim.stage_lr_scale[spec.id - 1]
    )
    state.model.train()
    for _ in range(spec.iterations):
        batch = to_tensors(next(data))
        rec = train_step(state, batch, spec, run_dir)
        records.append(rec)
        if log is not None:
            log(rec)
    state.stage = spec.id
    _set_trainable(state.model, SUBNETS)
    return state, records


def adversarial_step(state: TrainState, batch, spec: StageSpec | None = None) -> dict:
    """One D update followed by one generator update (stage 3 by default)."""
    spec = spec or default_schedule()[2]
    if "disc" not in spec.trainable:
        raise ValueError("adversarial_step needs a stage that trains the discriminator")
    return train_step(state, batch, spec)


def evaluate_stage_loss(state: TrainState, batch, stage: int) -> float:
    """Stage objective on a batch without updating anything."""
    x, y_gt, labels = batch
    with torch.no_grad():
        terms, _ = compute_terms(state, x, y_gt, labels, stage)
        total, _ = total_loss(terms, state.weights, stage)
    return float(total)


def run_full_schedule(
    cfg: "RunConfig",
    dataset,
    run_dir: Path,
    stages=(1, 2, 3, 4),
    resume: Path | None = None,
) -> tuple[TrainState, list[Path]]:
    """Train the requested stages in order, writing one checkpoint per stage.

    Metrics go to ``run_dir/metrics.jsonl``. With ``resume``, training
    continues from that checkpoint's state.
    """
    from .checkpoint import load_checkpoint, save_checkpoint
    from .dataset import batch_iterator

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if resume is not None:
        state, _ = load_checkpoint(resume)
    else:
        state = cfg.make_state()
    schedule = {s.id: s for s in cfg.schedule()}
    written = []
    metrics_path = run_dir / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    with open(metrics_path, mode, encoding="utf-8") as fh:

        def log(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        for sid in stages:
            if resume is not None and sid <= state.stage:
                continue
            data = batch_iterator(dataset, cfg.optim.batch_size, seed=cfg.seed * 7919 + sid)
            state, records = train_stage(state, schedule[sid], data, log=log, run_dir=run_dir)
            logger.info("stage %d done: %d iterations, final total %.6g", sid, len(records), records[-1]["total"])
            path = run_dir / f"stage{sid}.ckpt"
            save_checkpoint(path, state, cfg)
            written.append(path)
    return state, written
