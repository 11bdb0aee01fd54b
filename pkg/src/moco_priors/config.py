"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from pydantic import ConfigDict, TypeAdapter, ValidationError

from .metrics import SsimParams
from .models import ModelConfig
from .motion import MotionConfig
from .priors import PriorMode
from .training import TrainConfig

__all__ = ["DataConfig", "PhantomConfig", "EvalConfig", "RunConfig", "ConfigError", "load_config", "apply_overrides",
           "config_schema"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    manifest: str = "manifest.json"
    split: tuple[int, int, int] = (8, 2, 2)
    slice_axis: int = 2
    slice_fraction: float = 0.6
    normalization: str = "percentile"
    p_lo: float = 0.0
    p_hi: float = 99.5
    min_foreground: float = 0.05
    foreground_threshold: float = 0.02
    redraw_motion_each_epoch: bool = True

    def __post_init__(self):
        if self.slice_axis not in (0, 1, 2):
            raise ValueError("data.slice_axis must be 0, 1 or 2")
        if not 0 < self.slice_fraction <= 1:
            raise ValueError("data.slice_fraction must be in (0, 1]")
        if self.normalization not in ("minmax", "percentile"):
            raise ValueError("data.normalization must be 'minmax' or 'percentile'")
        if any(c < 0 for c in self.split):
            raise ValueError("data.split counts must be non-negative")


@dataclass(frozen=True)
class PhantomConfig:
    n_subjects: int = 12
    size: tuple[int, int, int] = (64, 64, 16)
    n_shapes: int = 8
    texture: float = 0.2

    def __post_init__(self):
        if min(self.size) < 16:
            raise ValueError(f"phantom.size must be >= 16 along every axis, got {tuple(self.size)}")
        if self.n_subjects < 1 or self.n_shapes < 0:
            raise ValueError("phantom.n_subjects must be >= 1 and n_shapes >= 0")
        if self.texture < 0:
            raise ValueError("phantom.texture must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    panel_index: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError("eval.split must be train, val or test")


@dataclass(frozen=True)
class RunConfig:
    """All settings of a run.

    ``seed`` is the single root of randomness: it overrides ``motion.seed`` and
    ``train.seed`` and seeds the subject split and phantom generation.
    """

    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    prior: PriorMode = field(default_factory=PriorMode)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssim: SsimParams = field(default_factory=SsimParams)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> "RunConfig":
        return replace(
            self,
            motion=replace(self.motion, seed=self.seed),
            train=replace(self.train, seed=self.seed),
        )

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            return _adapter().validate_python(data)
        except ValidationError as exc:
            raise ConfigError(_format_errors(exc)) from None

    def validate(self, command: str) -> None:
        """Cross-section checks that need the whole config (and, for some commands, the file system)."""
        if self.model.injection != "baseline":
            if self.prior.kind == "none":
                raise ConfigError(f"model.injection={self.model.injection} requires a prior (prior.kind != none)")
            if self.model.n_prior != self.prior.n_prior:
                raise ConfigError(
                    f"model.n_prior={self.model.n_prior} does not match the {self.prior.kind} prior "
                    f"count {self.prior.n_prior}"
                )
        if command in ("simulate", "train", "eval"):
            root = Path(self.data.root)
            if not root.is_dir():
                raise ConfigError(f"data.root does not exist: {root}")


_CONFIG_CLASSES = (RunConfig, DataConfig, PhantomConfig, EvalConfig, MotionConfig, PriorMode, ModelConfig,
                   TrainConfig, SsimParams)


def _adapter() -> TypeAdapter:
    for cls in _CONFIG_CLASSES:
        cls.__pydantic_config__ = ConfigDict(extra="forbid")
    return TypeAdapter(RunConfig)


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(parts)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def config_schema() -> dict:
    return _adapter().json_schema()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides to a config dict (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        path = key.strip().split(".")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[path[-1]] = _parse_value(value)
    return data


def load_config(path=None, overrides=(), seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    return RunConfig.from_dict(data).resolved()
