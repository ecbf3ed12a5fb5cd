"""Run configuration: one JSON document covering every stage.

Sections mirror the pipeline (world, codec, model, adapter, lora, flow,
train, eval, paths). Parsing is strict: unknown keys raise with their full
path rather than being ignored. Every command echoes its resolved config into
its output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import world as world_mod
from .adapter import AdapterConfig
from .codec import LatentCodec
from .lora import LoraConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Raised for unknown keys, wrong types, or inconsistent sections."""


@dataclass
class WorldConfig:
    frames: int = 16
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 4
    radius_range: tuple[float, float] = (5.0, 9.0)
    speed_range: tuple[float, float] = (1.5, 3.0)
    train_scenes: int = 500
    val_scenes: int = 50
    text_len: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["radius_range"] = list(self.radius_range)
        d["speed_range"] = list(self.speed_range)
        return d


@dataclass
class CodecSection:
    spatial_patch: int = 4


@dataclass
class ModelSection:
    depth: int = 12
    width: int = 64
    heads: int = 4
    text_len: int = 8
    vocab_size: int = 16
    mlp_ratio: float = 4.0


@dataclass
class FlowConfig:
    sample_steps: int = 20
    # Injection weight during training: "constant" (w=1, schedule only at
    # sampling) or "cosine" (the sampling schedule read at the drawn t).
    train_injection: str = "constant"


@dataclass
class TrainSection:
    # Conditioning recipe (stages 1 and 2).
    lr: float = 5e-5
    batch_size: int = 2
    stage1_epochs: int = 1
    stage2_epochs: int = 2
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    # Backbone provisioning. Runs before the conditioning stages unless
    # base_checkpoint points at an existing one.
    pretrain_epochs: int = 40
    pretrain_lr: float = 6e-4
    pretrain_batch_size: int = 4
    pretrain_schedule: str = "cosine"
    base_checkpoint: str | None = None
    # Reuse artifacts from an earlier run instead of recomputing them: a
    # ranking.json for the motion-layer split, a finished conditioned
    # checkpoint for the ablation's reference row.
    ranking_path: str | None = None
    full_checkpoint: str | None = None
    # Layer analysis between pretraining and stage 1.
    ranking_samples: int = 50
    ranking_rule: str = "largest-gap"
    ranking_k: int | None = None
    n_skip: int = 3


@dataclass
class EvalSection:
    scenes: int = 20
    threshold: float = 75.0
    tolerance: int = 1
    ssim_window: int = 7


@dataclass
class PathsSection:
    train_split: str = "train"
    val_split: str = "val"


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    codec: CodecSection = field(default_factory=CodecSection)
    model: ModelSection = field(default_factory=ModelSection)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def codec_obj(self) -> LatentCodec:
        return LatentCodec(spatial_patch=self.codec.spatial_patch)

    def model_config(self) -> ModelConfig:
        codec = self.codec_obj()
        shape = codec.latent_shape(self.world.frames, self.world.height, self.world.width)
        return ModelConfig(
            depth=self.model.depth,
            width=self.model.width,
            heads=self.model.heads,
            text_len=self.model.text_len,
            vocab_size=self.model.vocab_size,
            latent_t=shape[1],
            latent_h=shape[2],
            latent_w=shape[3],
            latent_channels=shape[0],
            mlp_ratio=self.model.mlp_ratio,
        )

    def validate(self) -> "RunConfig":
        if self.world.text_len != self.model.text_len:
            raise ConfigError(
                f"world.text_len={self.world.text_len} != model.text_len={self.model.text_len}"
            )
        if self.model.vocab_size < len(world_mod.VOCAB):
            raise ConfigError(
                f"model.vocab_size={self.model.vocab_size} below vocabulary size "
                f"{len(world_mod.VOCAB)}"
            )
        if not 1 <= self.world.min_objects <= self.world.max_objects:
            raise ConfigError(
                f"object count range [{self.world.min_objects}, {self.world.max_objects}] invalid"
            )
        if self.flow.sample_steps < 2:
            raise ConfigError(f"flow.sample_steps must be >= 2, got {self.flow.sample_steps}")
        if self.flow.train_injection not in ("constant", "cosine"):
            raise ConfigError(
                f"flow.train_injection must be 'constant' or 'cosine', "
                f"got {self.flow.train_injection!r}"
            )
        if self.train.ranking_rule not in ("largest-gap", "fixed-k"):
            raise ConfigError(f"unknown train.ranking_rule {self.train.ranking_rule!r}")
        if self.train.pretrain_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"train.pretrain_schedule must be 'constant' or 'cosine', "
                f"got {self.train.pretrain_schedule!r}"
            )
        self.model_config()  # raises on indivisible grids via the codec
        self.world.seed = self.seed
        return self

    def to_dict(self) -> dict:
        def conv(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return conv(self)


_TUPLE_FIELDS = {"radius_range", "speed_range"}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(where + u for u in unknown))}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in _TUPLE_FIELDS:
            if not (isinstance(value, (list, tuple)) and len(value) == 2):
                raise ConfigError(f"{sub} must be a 2-element list")
            kwargs[name] = (float(value[0]), float(value[1]))
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    sections = {
        "world": WorldConfig,
        "codec": CodecSection,
        "model": ModelSection,
        "adapter": AdapterConfig,
        "lora": LoraConfig,
        "flow": FlowConfig,
        "train": TrainSection,
        "eval": EvalSection,
        "paths": PathsSection,
    }
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    unknown = set(data) - set(sections) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
            raise ConfigError(f"seed must be an integer, got {data['seed']!r}")
        kwargs["seed"] = data["seed"]
    for name, cls in sections.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    return RunConfig(**kwargs).validate()


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return from_dict(data)
