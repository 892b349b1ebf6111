"""Experiment configuration: JSON files validated against pydantic models.

Defaults are the full-scale constants (256x256x13 BEV, 32x32x256 features,
kd weight 1e5).  The ``desk`` profile shrinks the problem to CPU size.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .geometry import BEVGridSpec
from .graph import FUSION_KINDS
from .networks import FULL_WIDTHS, VALID_RATIOS
from .scene import SceneConfig

KD_LAYERS = ("H", "M1", "M2", "M3", "M4")
PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneSection(_Strict):
    box_count: tuple[int, int] = (30, 40)
    map_half_extent: float = 48.0
    min_gap: float = 0.5
    agent_count: tuple[int, int] = (2, 5)
    agent_radius: float = 20.0
    agent_min_distance: float = 8.0
    length_range: tuple[float, float] = (3.8, 5.2)
    width_range: tuple[float, float] = (1.7, 2.1)
    height_range: tuple[float, float] = (1.4, 2.0)
    ground_z: float = -1.8
    yaw_jitter: float = 0.15
    rays: int = Field(720, ge=1)
    max_range: float = Field(70.0, ge=0)
    max_tries: int = 400
    train_scenes: int = Field(200, ge=0)
    test_scenes: int = Field(40, ge=0)

    def to_scene_config(self) -> SceneConfig:
        d = self.model_dump(exclude={"train_scenes", "test_scenes"})
        return SceneConfig(**d)


class GridSection(_Strict):
    x_range: tuple[float, float] = (-32.0, 32.0)
    y_range: tuple[float, float] = (-32.0, 32.0)
    z_range: tuple[float, float] = (-3.0, 2.0)
    size: int = 256
    height_bins: int = 13

    @model_validator(mode="after")
    def _integral(self):
        if self.size % 16:
            raise ValueError("grid size must be divisible by 16")
        if abs((self.x_range[1] - self.x_range[0]) - (self.y_range[1] - self.y_range[0])) > 1e-9:
            raise ValueError("grid must be square")
        return self

    def to_spec(self) -> BEVGridSpec:
        return BEVGridSpec(self.x_range, self.y_range, self.z_range, self.size, self.height_bins)


class NetworkSection(_Strict):
    widths: tuple[int, int, int, int, int] = FULL_WIDTHS
    warp_mode: Literal["bilinear", "nearest"] = "bilinear"


class TrainSection(_Strict):
    lambda_kd: float = Field(1e5, ge=0)
    kd_layers: list[Literal["H", "M1", "M2", "M3", "M4"]] = ["H", "M1", "M2", "M3"]
    kd_reduce: Literal["sum", "mean"] = "sum"
    teacher_epochs: int = Field(10, ge=0)
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(1, ge=1)
    seed: int = 0
    lr: float = Field(1e-3, gt=0)
    lr_final_fraction: float = Field(1.0, gt=0, le=1)
    ratio: int = 1
    fusion: Literal["none", "sum", "average", "weighted_average", "max", "cat", "disco"] = "disco"
    pos_weight: float = Field(1.0, gt=0)
    smooth_l1_beta: float = Field(1.0, gt=0)

    @field_validator("ratio")
    @classmethod
    def _ratio(cls, v):
        if v not in VALID_RATIOS:
            raise ValueError(f"ratio must be one of {VALID_RATIOS}")
        return v

    @field_validator("kd_layers")
    @classmethod
    def _unique(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("kd_layers must not repeat")
        return v


class EvalSection(_Strict):
    score_threshold: float = Field(0.3, ge=0, le=1)
    nms_iou: float = Field(0.3, gt=0, le=1)
    max_boxes: int = Field(100, ge=1)


class ExperimentConfig(_Strict):
    scene: SceneSection = SceneSection()
    grid: GridSection = GridSection()
    network: NetworkSection = NetworkSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    output_dir: str = "runs"
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        c = self.network.widths[3]
        if c % self.train.ratio:
            raise ValueError(f"feature channels {c} not divisible by ratio {self.train.ratio}")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def profile_dict(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {PROFILES}")
    return json.loads(resources.files("disconet.profiles").joinpath(f"{name}.json").read_text())


def _error_path(err: ValidationError) -> str:
    first = err.errors()[0]
    loc = ".".join(str(p) for p in first["loc"])
    return f"{loc}: {first['msg']}"


def config_from_dict(doc: dict, profile: str | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    merged = _merge(profile_dict(profile), doc) if profile else doc
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_error_path(exc)) from None


def load_config(path: str | Path | None = None, profile: str | None = None) -> ExperimentConfig:
    """Parse a JSON config, fill defaults (optionally from a profile) and validate.

    Unknown keys and type mismatches raise :class:`ConfigError` naming the key path.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc, profile)


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
