"""Run configuration: every tunable in one bundle, with ``paper`` and ``tiny`` profiles."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .blur import KERNEL_SIZES, DegradationConfig
from .dataset import DEFAULT_SCHEMA, AugmentConfig, LabelSchema
from .losses import FeatureExtractor, LossWeights
from .networks import DeblurNetConfig, DiscriminatorConfig, FaceDeblurModel, ParsingNetConfig
from .training import PAPER_ITERATIONS, OptimConfig, StageSpec, TrainState, default_schedule

PROFILES = ("paper", "tiny")


@dataclass(frozen=True)
class RunConfig:
    profile: str = "paper"
    seed: int = 0
    image_size: int = 128
    kernel_sizes: tuple[int, ...] = KERNEL_SIZES
    degradation: DegradationConfig = DegradationConfig()
    augment: AugmentConfig = AugmentConfig()
    use_augment: bool = True
    deblur: DeblurNetConfig = DeblurNetConfig()
    parsing: ParsingNetConfig = ParsingNetConfig()
    disc: DiscriminatorConfig = DiscriminatorConfig()
    schema: LabelSchema = DEFAULT_SCHEMA
    weights: LossWeights = LossWeights()
    optim: OptimConfig = OptimConfig()
    scale_factor: float = 1.0
    stage_iterations: dict = field(default_factory=lambda: dict(PAPER_ITERATIONS))
    feature_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    num_fine: int = 1
    share_fine: bool = False

    def schedule(self) -> list[StageSpec]:
        return default_schedule(self.scale_factor, self.stage_iterations)

    def build_model(self) -> FaceDeblurModel:
        return FaceDeblurModel(
            self.deblur,
            self.schema.num_classes,
            self.parsing,
            self.disc,
            num_fine=self.num_fine,
            share_fine=self.share_fine,
            seed=self.seed,
        )

    def make_state(self) -> TrainState:
        model = self.build_model()
        return TrainState(
            model=model,
            optim=self.optim,
            weights=self.weights,
            schema=self.schema,
            fx=FeatureExtractor(self.feature_widths, seed=1234),
        )

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        base = profile_config(data.pop("profile", "paper"))
        return _merge(base, data)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    return obj


def _coerce(current: Any, value: Any) -> Any:
    if dataclasses.is_dataclass(current) and isinstance(value, dict):
        return _merge(current, value)
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(current, dict) and isinstance(value, dict):
        # JSON turns the integer stage ids into strings
        return {**current, **{int(k) if str(k).isdigit() else k: v for k, v in value.items()}}
    return value


def _merge(obj: Any, overrides: dict) -> Any:
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown {type(obj).__name__} keys: {sorted(unknown)}")
    return replace(obj, **{k: _coerce(getattr(obj, k), v) for k, v in overrides.items()})


def profile_config(name: str) -> RunConfig:
    """Canonical settings: ``paper`` (128 px, published weights) or ``tiny`` (32 px, CI scale)."""
    if name == "paper":
        return RunConfig()
    if name == "tiny":
        return RunConfig(
            profile="tiny",
            image_size=32,
            kernel_sizes=(7, 9),
            use_augment=False,
            deblur=DeblurNetConfig(base_channels=8, first_kernel=7),
            parsing=ParsingNetConfig(widths=(8, 16, 32, 64)),
            disc=DiscriminatorConfig(input_size=32, channels=(8, 16, 32, 64)),
            weights=LossWeights(lambda_s=0.05),
            optim=OptimConfig(
                batch_size=4,
                lr_parsing=2e-3,
                lr_deblur=2e-3,
                lr_disc=1e-4,
                stage_lr_scale=(1.0, 1.0, 1.0, 0.1),
            ),
            scale_factor=0.00025,
            feature_widths=(8, 16, 16, 16, 16),
        )
    raise ValueError(f"unknown profile {name!r}; expected one of {PROFILES}")


def load_config(path: Path | None, profile: str | None = None, **overrides) -> RunConfig:
    """Profile defaults, then the JSON file, then explicit keyword overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        data = json.loads(path.read_text())
    if profile is not None:
        data["profile"] = profile
    cfg = RunConfig.from_dict(data)
    return _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
