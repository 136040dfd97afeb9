"""Serializable training configuration with desk-scale and paper-scale presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ppap.errors import InvalidArgument
from ppap.fusion import STRATEGIES


@dataclass
class ModelConfig:
    n_attributes: int = 2
    n_samples: int = 2
    template_length: int = 8
    token_dim: int = 64
    embed_dim: int = 64
    feat_dim: int = 64
    head_width: int = 32
    text_encoder_seed: int = 0
    prompt_seed: int = 1
    gkp: bool = True
    temperature_init: float = 10.0
    heatmap_sigma_cells: float = 2.0  # in cells of the prediction grid


@dataclass
class LossConfig:
    gamma: float = 5e-4
    beta: float = 1e-5
    use_div: bool = True
    use_kl: bool = True


@dataclass
class FusionConfig:
    strategy: str = "ensemble"
    attention_layers: int = 2


@dataclass
class DataConfig:
    species: list[str] = field(default_factory=lambda: ["quad-A", "quad-B"])
    n_per_species: int = 16
    input_size: int = 64
    image_size: int = 64
    noise_level: float = 0.03
    seed: int = 0
    dataset: str | None = None
    padding: float = 1.25
    kappa: float = 0.08


@dataclass
class AugConfig:
    enabled: bool = False
    rotation_max_deg: float = 40.0
    scale_range: list[float] = field(default_factory=lambda: [0.5, 1.5])
    flip_prob: float = 0.5


@dataclass
class TrainSection:
    lr: float = 2e-3
    weight_decay: float = 2.5e-5
    batch_size: int = 16
    epochs: int = 250
    lr_milestones: list[int] = field(default_factory=lambda: [200, 240])
    lr_factor: float = 0.1
    max_steps: int | None = None
    seed: int = 0
    freeze_text_encoder: bool = True


@dataclass
class EvalConfig:
    alpha: float = 0.05
    stochastic_eval: int = 0


_SECTIONS = {
    "model": ModelConfig, "loss": LossConfig, "fusion": FusionConfig, "data": DataConfig,
    "aug": AugConfig, "train": TrainSection, "eval": EvalConfig,
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m, t = self.model, self.train
        if m.n_attributes < 1 or m.n_samples < 1 or m.template_length < 1:
            raise InvalidArgument("n_attributes, n_samples and template_length must be >= 1")
        if self.fusion.strategy not in STRATEGIES:
            raise InvalidArgument(f"fusion.strategy must be one of {STRATEGIES}")
        ms = list(t.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(x >= t.epochs or x < 0 for x in ms):
            raise InvalidArgument(f"lr_milestones {ms} must be strictly increasing and < epochs={t.epochs}")
        if not t.freeze_text_encoder:
            raise InvalidArgument("the text encoder is always frozen")
        if self.data.input_size % 8:
            raise InvalidArgument("data.input_size must be a multiple of 8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise InvalidArgument(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, klass in _SECTIONS.items():
            raw = dict(d.get(name, {}))
            allowed = {f.name for f in fields(klass)}
            bad = set(raw) - allowed
            if bad:
                raise InvalidArgument(f"unknown keys in '{name}': {sorted(bad)}")
            sections[name] = klass(**raw)
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def paper_scale(self) -> "TrainConfig":
        """Same config with the reported schedule, batch size and input resolution."""
        return replace(
            self,
            data=replace(self.data, input_size=256),
            aug=replace(self.aug, enabled=True),
            train=replace(self.train, lr=3e-4, weight_decay=2.5e-5, batch_size=64, epochs=210,
                          lr_milestones=[170, 200], lr_factor=0.1, max_steps=None),
        )
