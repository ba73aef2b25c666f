"""Model and training hyperparameters."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


VARIANT_TOKEN_DIMS = {"small": 64, "base": 192, "medium": 320, "large": 512}
LAYER_LEVELS = {1: (2, 3, 3), 2: (3, 3, 3), 3: (3, 3, 4), 4: (3, 6, 3)}


@dataclass
class ModelConfig:
    token_dim: int = 320
    layers_per_stage: tuple = (3, 3, 3)
    cnn_base_width: int = 64
    cnn_blocks_per_stage: tuple = (2, 2, 2)
    cnn_block: str = "basic"
    num_heads: int | None = None
    mlp_ratio: float = 4.0
    attn_drop: float = 0.0
    reduction_ratio: int = 16
    decoder_widths: tuple = (256, 128, 64)
    num_classes: int = 9
    input_size: int = 224
    in_channels: int = 3
    patch_overlap: bool = False
    four_stages: bool = False
    no_pyramid: bool = False
    no_channel_attention: bool = False
    seed: int = 0

    def __post_init__(self):
        self.layers_per_stage = tuple(int(v) for v in self.layers_per_stage)
        self.cnn_blocks_per_stage = tuple(int(v) for v in self.cnn_blocks_per_stage)
        self.decoder_widths = tuple(int(v) for v in self.decoder_widths)
        self.validate()

    @property
    def num_stages(self) -> int:
        return 4 if self.four_stages else 3

    @property
    def reduction(self) -> int:
        return 2 ** (self.num_stages + 1)

    def stage_layers(self) -> tuple:
        """Transformer layers per stage, extended to the stage count by repeating the last entry."""
        layers = self.layers_per_stage
        n = self.num_stages
        return tuple(layers[:n]) + (layers[-1],) * max(0, n - len(layers))

    def stage_blocks(self) -> tuple:
        blocks = self.cnn_blocks_per_stage
        n = self.num_stages
        return tuple(blocks[:n]) + (blocks[-1],) * max(0, n - len(blocks))

    def vit_widths(self) -> tuple:
        return tuple(self.token_dim * 2 ** j for j in range(self.num_stages))

    def cnn_widths(self) -> tuple:
        return tuple(self.cnn_base_width * 2 ** i for i in range(self.num_stages))

    def heads_for(self, dim: int) -> int:
        return self.num_heads if self.num_heads is not None else max(1, dim // 64)

    def decoder_plan(self) -> tuple:
        """Widths of the skip-connected decoder blocks followed by the final-head width."""
        widths = self.decoder_widths
        need = self.num_stages
        if len(widths) < need:
            widths = tuple(widths[0] * 2 ** (need - len(widths) - i) for i in range(need - len(widths))) + widths
        return widths[:need]

    def validate(self) -> None:
        if self.token_dim < 1 or self.cnn_base_width < 1:
            raise ConfigError("token_dim and cnn_base_width must be positive")
        if not self.layers_per_stage or min(self.layers_per_stage) < 1:
            raise ConfigError(f"layers_per_stage entries must be >= 1, got {self.layers_per_stage}")
        if not self.cnn_blocks_per_stage or min(self.cnn_blocks_per_stage) < 1:
            raise ConfigError(f"cnn_blocks_per_stage entries must be >= 1, got {self.cnn_blocks_per_stage}")
        if self.cnn_block not in ("basic", "bottleneck"):
            raise ConfigError(f"cnn_block must be 'basic' or 'bottleneck', got {self.cnn_block!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.decoder_widths) < 3 or min(self.decoder_widths) < 1:
            raise ConfigError(f"decoder_widths needs 3 positive entries, got {self.decoder_widths}")
        if self.no_pyramid and (self.four_stages or self.patch_overlap):
            raise ConfigError("no_pyramid cannot be combined with four_stages or patch_overlap")
        if self.input_size % self.reduction:
            raise ConfigError(f"input_size {self.input_size} must be divisible by {self.reduction}")
        if not 0.0 <= self.attn_drop < 1.0:
            raise ConfigError("attn_drop must lie in [0, 1)")
        dims = (4 * self.token_dim,) if self.no_pyramid else self.vit_widths()
        for d in dims:
            h = self.heads_for(d)
            if h < 1 or d % h:
                raise ConfigError(f"embed dim {d} not divisible by {h} heads")

    @classmethod
    def variant(cls, name: str = "medium", level: int = 2, **overrides) -> "ModelConfig":
        """Named token-dim variant (small/base/medium/large) and layer level 1-4."""
        return cls(token_dim=VARIANT_TOKEN_DIMS[name], layers_per_stage=LAYER_LEVELS[level], **overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """64 px, C=32, C'=16 configuration used for CPU training runs."""
        base = dict(token_dim=32, cnn_base_width=16, layers_per_stage=(1, 1, 1), cnn_blocks_per_stage=(1, 1, 1),
                    decoder_widths=(64, 32, 16), num_classes=4, input_size=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def minimal(cls, **overrides) -> "ModelConfig":
        """Smallest configuration used by the whole-network gradient check."""
        base = dict(token_dim=8, cnn_base_width=8, layers_per_stage=(1, 1, 1), cnn_blocks_per_stage=(1, 1, 1),
                    num_heads=2, mlp_ratio=2.0, decoder_widths=(8, 8, 4), num_classes=2, input_size=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 150
    poly_power: float = 0.9
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    eval_every: int = 0
    augment: bool = True
    lambda_dice: float = 0.5
    lambda_ce: float = 0.5
    dice_include_background: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lambda_dice < 0 or self.lambda_ce < 0:
            raise ConfigError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}`` JSON; either section may be omitted."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))


def save_config(path, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> None:
    payload = {"model": model_cfg.to_dict()}
    if train_cfg is not None:
        payload["train"] = train_cfg.to_dict()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
