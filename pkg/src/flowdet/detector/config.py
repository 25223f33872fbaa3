"""Model/training hyperparameters with a strict JSON text form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..attention import SaaConfig
from ..deform import GduConfig, grid_points


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    total_steps: int = 2000
    min_lr: float = 0.0
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    stage_channels: tuple[int, int] = (16, 32)
    arb_count: int = 3
    gdu_kernel: int = 3
    gdu_sigma: float = 4.0
    gdu_epsilon: float | None = None
    gdu_tau: float = 4.0
    saa: SaaConfig = field(default_factory=SaaConfig)
    query_count: int = 25
    class_count: int = 3
    decoder_layers: int = 2
    decoder_ffn: int = 128
    pixel_mean: tuple[float, float, float] = (0.45, 0.43, 0.40)  # per-channel input standardisation
    pixel_std: tuple[float, float, float] = (0.12, 0.12, 0.12)
    ref_width: float = 0.15  # Gaussian width of each query's spatial prior (0 disables the prior)
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    eos_coef: float = 0.1
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 4
    seed: int = 0
    dtype: str = "f32"
    backbone: str = "pafc"  # or "plain"
    encoder: str = "saa"  # or "plain"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 4 or w % 4:
            raise ConfigError(f"input_size {self.input_size} must be positive multiples of 4")
        if len(self.stage_channels) != 2 or any(c <= 0 or c % 2 for c in self.stage_channels):
            raise ConfigError(f"stage_channels {self.stage_channels} must be two positive even ints")
        if self.arb_count < 1:
            raise ConfigError("arb_count must be >= 1")
        if self.query_count < 1 or self.class_count < 1:
            raise ConfigError("query_count and class_count must be >= 1")
        if min(self.lambda_cls, self.lambda_l1, self.lambda_giou, self.eos_coef) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype}")
        if self.backbone not in ("pafc", "plain") or self.encoder not in ("saa", "plain"):
            raise ConfigError("backbone must be pafc|plain and encoder saa|plain")
        if self.saa.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 (2-D sinusoidal encoding)")
        if len(self.pixel_mean) != self.in_channels or len(self.pixel_std) != self.in_channels \
                or min(self.pixel_std) <= 0:
            raise ConfigError("pixel_mean/pixel_std need one entry per input channel and std > 0")
        if self.ref_width < 0:
            raise ConfigError("ref_width must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.gdu()  # raises on invalid GDU settings

    def gdu(self) -> GduConfig:
        try:
            return GduConfig(grid_points(self.gdu_kernel), self.gdu_sigma, self.gdu_epsilon, self.gdu_tau)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.input_size[0] // 4, self.input_size[1] // 4

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------------ text form

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "saa" in d:
            d["saa"] = _strict(SaaConfig, d["saa"], "saa")
        if "optimizer" in d:
            opt = _strict(OptimConfig, d["optimizer"], "optimizer")
            opt.betas = tuple(opt.betas)
            d["optimizer"] = opt
        for key in ("input_size", "stage_channels", "pixel_mean", "pixel_std"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _strict(kind, d, where):
    if isinstance(d, kind):
        return d
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return kind(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def micro_config(**overrides) -> ModelConfig:
    """Smallest configuration used for end-to-end gradient checks."""
    base = dict(
        input_size=(16, 16),
        stage_channels=(8, 8),
        arb_count=2,
        saa=SaaConfig(embed_dim=8, heads=2, window_size=2, reduction_ratio=2, ffn_dim=8),
        query_count=4,
        class_count=2,
        decoder_layers=1,
        decoder_ffn=8,
        dtype="f64",
    )
    base.update(overrides)
    return ModelConfig(**base)
