"""Run configuration: a JSON document mirroring :class:`RunConfig`."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .exceptions import ConfigurationError
from .trainer import OptimizerConfig

RUN_ABLATIONS = ("full", "no_accumulation", "no_vision_prompts", "no_regularization", "zero_shot")


@dataclass
class ToyBackboneConfig:
    num_layers: int = 2
    d_nlp: int = 32
    d_cv: int = 48
    num_heads: int = 4
    joint_dim: int = 32
    patch_size: int = 8
    text_max_len: int = 24
    vision_max_len: int = 40
    logit_scale: float = 10.0
    pretrain_steps: int = 600
    pretrain_batch_size: int = 32
    pretrain_learning_rate: float = 2e-3
    corpus_per_class: int = 20
    corpus_noise: float = 0.3
    corpus_seed: int = 4
    seed: int = 0


@dataclass
class StreamConfig:
    """Synthetic benchmark plus its session split."""

    num_classes: int = 10
    per_class: int = 40
    image_size: int = 32
    noise: float = 0.5
    contrast: float = 0.6
    dataset_seed: int = 3
    base_classes: int = 6
    way: int = 2
    shot: int = 3
    sessions: int = 2
    base_shot: int | None = None
    manifest: str | None = None


# the 2 x 5 sweep used for a 12-layer CLIP backbone
FULL_SCALE_GRID = {"L_list": [2, 4], "D_list": [1, 3, 6, 9, 12]}


@dataclass
class GridConfig:
    """Prompt lengths and depths to sweep; the default fits the toy backbone."""

    L_list: list[int] = field(default_factory=lambda: [2, 4])
    D_list: list[int] = field(default_factory=lambda: [1, 2])

    def cells(self) -> list[tuple[int, int]]:
        return [(L, D) for L in self.L_list for D in self.D_list]


def _toy_optimizer() -> OptimizerConfig:
    # the toy backbone is far smaller than CLIP and wants a much larger step
    return OptimizerConfig(learning_rate=0.5, epochs=20, batch_size=16, incremental_epochs=5, incremental_batch_size=4)


@dataclass
class RunConfig:
    backbone: str = "toy"  # "toy" or "adapter:<checkpoint path>"
    L: int = 2
    D: int = 2
    ablation: str = "full"
    optimizer: OptimizerConfig = field(default_factory=_toy_optimizer)
    toy: ToyBackboneConfig = field(default_factory=ToyBackboneConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self) -> "RunConfig":
        if self.backbone != "toy" and not self.backbone.startswith("adapter:"):
            raise ConfigurationError(f"backbone must be 'toy' or 'adapter:<path>', got {self.backbone!r}")
        if self.ablation not in RUN_ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {RUN_ABLATIONS}, got {self.ablation!r}")
        if not self.seeds:
            raise ConfigurationError("seeds must be a non-empty list")
        if self.L < 1 or self.D < 1:
            raise ConfigurationError("L and D must be positive")
        if self.backbone == "toy" and self.D > self.toy.num_layers:
            raise ConfigurationError(f"D={self.D} exceeds the toy backbone depth {self.toy.num_layers}")
        if self.ablation != "zero_shot":
            self.optimizer.validate()
        if not self.grid.L_list or not self.grid.D_list:
            raise ConfigurationError("grid L_list and D_list must be non-empty")
        return self

    def validate_grid(self) -> "RunConfig":
        """Extra checks before a grid run: every cell must fit the backbone."""
        for L, D in self.grid.cells():
            self.with_overrides(L=L, D=D).validate()
        return self

    @property
    def adapter_path(self) -> str | None:
        return self.backbone.split(":", 1)[1] if self.backbone.startswith("adapter:") else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("configuration must be a JSON object")
        nested = {"optimizer": OptimizerConfig, "toy": ToyBackboneConfig, "stream": StreamConfig, "grid": GridConfig}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            if key == "optimizer" and value is None:
                continue  # zero-shot runs may omit the optimizer entirely
            if key in nested:
                kwargs[key] = _build(nested[key], value, key)
            else:
                kwargs[key] = value
        try:
            config = cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        _check_types(config)
        return config.validate()

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def _build(kind, value, name):
    if not isinstance(value, dict):
        raise ConfigurationError(f"{name} must be an object")
    known = {f.name for f in fields(kind)}
    unknown = set(value) - known
    if unknown:
        raise ConfigurationError(f"unknown {name} keys: {sorted(unknown)}")
    return kind(**value)


def _check_types(config: RunConfig) -> None:
    for section in (config, config.optimizer, config.toy, config.stream, config.grid):
        for f in fields(section):
            value = getattr(section, f.name)
            expected = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
            if expected == "int" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigurationError(f"{f.name} must be an integer, got {value!r}")
            if expected == "float" and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigurationError(f"{f.name} must be a number, got {value!r}")
            if expected == "str" and not isinstance(value, str):
                raise ConfigurationError(f"{f.name} must be a string, got {value!r}")
    for name, values in (("seeds", config.seeds), ("L_list", config.grid.L_list), ("D_list", config.grid.D_list)):
        if not isinstance(values, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
            raise ConfigurationError(f"{name} must be a list of integers")


def render_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"configuration is not valid JSON: {exc}") from None
    return RunConfig.from_dict(data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from None
    return parse_config(text)
