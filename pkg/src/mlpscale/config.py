"""JSON run and sweep configuration with validation and materialised defaults."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import AugmentConfig, SynthSpec
from .model import ModelConfig, parse_notation
from .train import MODE_DEFAULTS, TrainConfig

Mode = Literal["scratch", "pretrain", "finetune", "probe"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class ModelSection(_Strict):
    depth: int = Field(gt=0)
    width: int = Field(gt=0)
    expansion: int = Field(4, gt=0)
    block_kind: Literal["standard", "inverted_bottleneck"] = "inverted_bottleneck"
    activation: Literal["relu", "gelu"] = "relu"
    dropout: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="before")
    @classmethod
    def _from_notation(cls, v):
        if isinstance(v, str):
            depth, width = parse_notation(v)
            return {"depth": depth, "width": width}
        return v

    def build(self, image_shape, num_classes: int) -> ModelConfig:
        return ModelConfig(image_shape=tuple(image_shape), num_classes=num_classes, **self.model_dump())


class SynthSection(_Strict):
    n: int = Field(2000, gt=0)
    n_test: int = Field(500, gt=0)
    h: int = Field(8, gt=0)
    w: int = Field(8, gt=0)
    c: int = Field(3, gt=0)
    num_classes: int = Field(10, ge=2)
    pattern: Literal["bright_pixel", "prototype"] = "prototype"
    noise: float = Field(0.8, ge=0.0, le=1.0)
    task_seed: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)

    def specs(self) -> tuple[SynthSpec, SynthSpec]:
        common = dict(h=self.h, w=self.w, c=self.c, num_classes=self.num_classes, pattern=self.pattern,
                      noise=self.noise, task_seed=self.task_seed)
        return SynthSpec(n=self.n, **common), SynthSpec(n=self.n_test, **common)


class DatasetSection(_Strict):
    kind: Literal["synth", "cifar10", "mlds"] = "synth"
    path: Optional[str] = None
    test_path: Optional[str] = None
    synth: SynthSection = SynthSection()
    resize: Optional[int] = Field(None, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _from_name(cls, v):
        return {"kind": v} if isinstance(v, str) else v

    @model_validator(mode="after")
    def _paths(self):
        if self.kind == "cifar10" and not self.path:
            raise ValueError("cifar10 datasets need 'path' (the cifar-10-batches-bin directory)")
        if self.kind == "mlds" and not (self.path and self.test_path):
            raise ValueError("mlds datasets need 'path' and 'test_path'")
        return self


class AugmentSection(_Strict):
    flip: Optional[bool] = None
    crop_padding: Optional[int] = Field(None, ge=0)
    mixup: Optional[float] = Field(None, ge=0.0)
    label_smoothing: Optional[float] = Field(None, ge=0.0, lt=1.0)


class OptimizerSection(_Strict):
    name: Optional[Literal["lion", "sgd"]] = None
    lr: Optional[float] = Field(None, ge=0.0)
    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.99, gt=0.0, lt=1.0)
    weight_decay: Optional[float] = Field(None, ge=0.0)
    momentum: Optional[float] = Field(None, ge=0.0, lt=1.0)
    lr_head: Optional[float] = Field(None, ge=0.0)
    lr_body: Optional[float] = Field(None, ge=0.0)
    clip_norm: Optional[float] = Field(None, gt=0.0)


def _fill(section: BaseModel, defaults: dict) -> None:
    for name, value in defaults.items():
        if getattr(section, name) is None:
            object.__setattr__(section, name, value)


class RunConfig(_Strict):
    mode: Mode = "scratch"
    model: Optional[ModelSection] = None
    dataset: DatasetSection = DatasetSection()
    epochs: int = Field(1, gt=0)
    batch_size: Optional[int] = Field(None, gt=0)
    seed: int = Field(0, ge=0)
    eval_every: int = Field(1, gt=0)
    optimizer: OptimizerSection = OptimizerSection()
    augment: AugmentSection = AugmentSection()
    pretrained: Optional[str] = None
    auto_resize: bool = True
    threads: Optional[int] = Field(None, gt=0)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _materialise(self):
        d = MODE_DEFAULTS[self.mode]
        base = TrainConfig()
        if self.batch_size is None:
            self.batch_size = d.get("batch_size", base.batch_size)
        aug: AugmentConfig = d["augment"]
        _fill(self.augment, dict(flip=aug.flip, crop_padding=aug.crop_padding, mixup=aug.mixup,
                                 label_smoothing=aug.label_smoothing))
        _fill(self.optimizer, dict(name=d.get("optimizer", base.optimizer), lr=d.get("lr", base.lr),
                                   weight_decay=d.get("weight_decay", base.weight_decay),
                                   momentum=d.get("momentum", base.momentum),
                                   lr_head=d.get("lr_head", base.lr_head), lr_body=d.get("lr_body", base.lr_body)))
        if self.mode in ("finetune", "probe"):
            if not self.pretrained:
                raise ValueError(f"mode {self.mode!r} needs a 'pretrained' checkpoint path")
        elif self.model is None and not isinstance(self, SweepConfig):
            raise ValueError(f"mode {self.mode!r} needs a 'model'")
        return self

    def train_config(self) -> TrainConfig:
        o, a = self.optimizer, self.augment
        return TrainConfig(mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, optimizer=o.name,
                           lr=o.lr, beta1=o.beta1, beta2=o.beta2, weight_decay=o.weight_decay,
                           momentum=o.momentum, lr_head=o.lr_head, lr_body=o.lr_body, clip_norm=o.clip_norm,
                           augment=AugmentConfig(flip=a.flip, crop_padding=a.crop_padding, mixup=a.mixup,
                                                 label_smoothing=a.label_smoothing),
                           seed=self.seed, eval_every=self.eval_every, auto_resize=self.auto_resize)


class ProbeSection(_Strict):
    dataset: Optional[DatasetSection] = None
    epochs: int = Field(10, gt=0)
    lr: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(256, gt=0)


class SweepSection(_Strict):
    models: list[ModelSection] = Field(min_length=1)
    fractions: list[float] = Field(min_length=1)
    epochs: list[int] = Field(min_length=1)
    probe: Optional[ProbeSection] = None

    @field_validator("fractions")
    @classmethod
    def _fractions(cls, v):
        if any(not 0.0 < f <= 1.0 for f in v):
            raise ValueError("fractions must lie in (0, 1]")
        if len(set(v)) != len(v):
            raise ValueError("fractions must be distinct")
        return v

    @field_validator("epochs")
    @classmethod
    def _epochs(cls, v):
        if any(t < 1 for t in v) or len(set(v)) != len(v):
            raise ValueError("epoch budgets must be distinct positive integers")
        return sorted(v)


class SweepConfig(RunConfig):
    mode: Mode = "pretrain"
    sweep: SweepSection

    @model_validator(mode="before")
    @classmethod
    def _sweep_epochs(cls, v):
        if isinstance(v, dict) and isinstance(v.get("sweep"), dict) and "epochs" not in v:
            budgets = v["sweep"].get("epochs") or [1]
            if isinstance(budgets, list) and all(isinstance(t, int) for t in budgets):
                v = {**v, "epochs": max(budgets)}
        return v

    @model_validator(mode="after")
    def _sweep_modes(self):
        if self.mode not in ("scratch", "pretrain"):
            raise ValueError("sweeps train models from scratch; mode must be 'scratch' or 'pretrain'")
        if self.model is not None:
            raise ValueError("sweeps list their models under sweep.models, not 'model'")
        return self


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc or '<root>'}: {err['msg']}")
    return "; ".join(lines)


def parse_config_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    cls = SweepConfig if "sweep" in data else RunConfig
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def parse_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config_dict(data)


def effective_config(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


def write_effective_config(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "effective_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(effective_config(cfg), indent=2, sort_keys=True) + "\n")
    return path
