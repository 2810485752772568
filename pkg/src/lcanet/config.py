"""Dataclass configuration for the model, data generator, training and CLI runs.

Config files are TOML with one table per section (``grammar``, ``render``,
``data``, ``model``, ``train``, ``decode``, ``paths``) plus a top-level
``seed``. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


VARIANTS = ("ah-ctc", "a-ctc", "h-ctc", "ah-ctc-ce")


@dataclass
class ConvBlockSpec:
    out_channels: int
    kernel: tuple[int, int, int] = (3, 5, 5)
    stride: tuple[int, int, int] = (1, 2, 2)
    pad: tuple[int, int, int] = (1, 2, 2)
    pool: tuple[int, int, int] = (1, 2, 2)
    pool_stride: tuple[int, int, int] = (1, 2, 2)

    def __post_init__(self):
        for name in ("kernel", "stride", "pad", "pool", "pool_stride"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))


def _table1_blocks() -> list[ConvBlockSpec]:
    # conv3 is printed with stride 1,2,2 but its printed output only fits stride 1
    return [
        ConvBlockSpec(32, (3, 5, 5), (1, 2, 2), (1, 2, 2)),
        ConvBlockSpec(64, (3, 5, 5), (1, 1, 1), (1, 2, 2)),
        ConvBlockSpec(96, (3, 5, 5), (1, 1, 1), (1, 2, 2)),
    ]


def _toy_blocks() -> list[ConvBlockSpec]:
    return [
        ConvBlockSpec(8, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ConvBlockSpec(16, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ConvBlockSpec(24, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ]


@dataclass
class EncoderConfig:
    in_channels: int = 1
    frame_height: int = 8
    frame_width: int = 16
    conv_blocks: list[ConvBlockSpec] = field(default_factory=_toy_blocks)
    highway_layers: int = 2
    gru_hidden: int = 32
    gru_layers: int = 2
    dropout: float = 0.5
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.conv_blocks = [b if isinstance(b, ConvBlockSpec) else ConvBlockSpec(**b) for b in self.conv_blocks]

    def block_shapes(self) -> list[tuple[tuple[int, int, int, int], tuple[int, int, int, int]]]:
        """(conv output, pool output) as (C, T, H, W) per block for a clip of T=1."""
        from .tensor.conv import conv_output_shape, pool_output_shape

        shapes = []
        t, h, w = 1, self.frame_height, self.frame_width
        for b in self.conv_blocks:
            ct, ch, cw = conv_output_shape((t, h, w), b.kernel, b.stride, b.pad)
            pt, ph, pw = pool_output_shape((ct, ch, cw), b.pool, b.pool_stride)
            shapes.append(((b.out_channels, ct, ch, cw), (b.out_channels, pt, ph, pw)))
            t, h, w = pt, ph, pw
        return shapes

    @property
    def feature_width(self) -> int:
        """Per-frame flattened conv output width C' * H' * W' (the highway width)."""
        c, _, h, w = self.block_shapes()[-1][1]
        return c * h * w

    @property
    def output_width(self) -> int:
        return 2 * self.gru_hidden


@dataclass
class DecoderConfig:
    state_size: int = 64
    attention_size: int = 32
    embed_size: int = 16


@dataclass
class ModelConfig:
    variant: str = "ah-ctc"
    vocab_size: int = 28
    ce_lambda: float = 0.5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    table1: bool = False

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        self.variant = self.variant.lower()
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.ce_lambda <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.ce_lambda}")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary needs the blank plus at least one symbol")
        if self.encoder.gru_layers < 1:
            raise ConfigError("at least one Bi-GRU layer is required")
        self.encoder.block_shapes()
        if self.table1:
            if (self.encoder.conv_blocks != _table1_blocks()
                    or (self.encoder.in_channels, self.encoder.frame_height, self.encoder.frame_width) != (3, 50, 100)
                    or self.encoder.gru_hidden != 256 or self.vocab_size != 28):
                raise ConfigError(
                    "table1 = true requires the full-scale encoder (3x50x100 frames, 32/64/96 channels, "
                    "256 hidden units per direction, 28 symbols); drop the toggle or the overrides"
                )

    @property
    def uses_highway(self) -> bool:
        return self.variant != "a-ctc"

    @property
    def uses_attention(self) -> bool:
        return self.variant != "h-ctc"

    @property
    def uses_ce(self) -> bool:
        return self.variant == "ah-ctc-ce"

    def effective_encoder(self) -> EncoderConfig:
        if self.uses_highway:
            return self.encoder
        return dataclasses.replace(self.encoder, highway_layers=0)


def table1_config(variant: str = "ah-ctc") -> ModelConfig:
    """Full-scale architecture: 3x75x50x100 clips, 28 output symbols."""
    enc = EncoderConfig(
        in_channels=3, frame_height=50, frame_width=100, conv_blocks=_table1_blocks(),
        highway_layers=2, gru_hidden=256, gru_layers=2,
    )
    return ModelConfig(variant=variant, vocab_size=28, encoder=enc,
                       decoder=DecoderConfig(256, 256, 32), table1=True)


def toy_config(variant: str = "ah-ctc", **overrides) -> ModelConfig:
    return ModelConfig(variant=variant, **overrides)


@dataclass
class GrammarConfig:
    commands: list[str] = field(default_factory=lambda: ["bin", "lay", "place", "set"])
    colors: list[str] = field(default_factory=lambda: ["blue", "green", "red", "white"])
    prepositions: list[str] = field(default_factory=lambda: ["at", "by", "in", "with"])
    letters: list[str] = field(default_factory=lambda: [c for c in "abcdefghijklmnopqrstuvxyz"])
    digits: list[str] = field(default_factory=lambda: [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"])
    adverbs: list[str] = field(default_factory=lambda: ["again", "now", "please", "soon"])

    def categories(self) -> list[list[str]]:
        return [self.commands, self.colors, self.prepositions, self.letters, self.digits, self.adverbs]


@dataclass
class RenderConfig:
    height: int = 8
    width: int = 16
    channels: int = 1
    min_frames_per_char: int = 2
    max_frames_per_char: int = 4
    crossfade: int = 1
    noise: float = 0.05
    max_frames: int = 64
    confusable_pairs: list[tuple[str, str]] = field(
        default_factory=lambda: [("b", "p"), ("f", "v"), ("r", "i"), ("t", "d")])
    confusable_scale: float = 0.3
    pattern_seed: int = 1234

    def __post_init__(self):
        self.confusable_pairs = [tuple(p) for p in self.confusable_pairs]


@dataclass
class DataConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    patience: int = 5
    clip_norm: float = 5.0
    loss_threshold: float = 4.0
    precision: str = "float32"
    threads: int = 1

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class DecodeConfig:
    beam_width: int = 10


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs"


@dataclass
class RunConfig:
    seed: int = 0
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _build(cls, values: dict[str, Any], where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        sub = _NESTED.get((cls, f.name))
        if sub is not None and isinstance(v, dict):
            v = _build(sub, v, f"{where}.{f.name}")
        elif f.name == "conv_blocks":
            v = [_build(ConvBlockSpec, b, f"{where}.conv_blocks") for b in v]
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"[{where}]: {err}") from None


_NESTED = {
    (RunConfig, "grammar"): GrammarConfig,
    (RunConfig, "render"): RenderConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "decode"): DecodeConfig,
    (RunConfig, "paths"): PathsConfig,
    (ModelConfig, "encoder"): EncoderConfig,
    (ModelConfig, "decoder"): DecoderConfig,
}


def config_from_dict(values: dict[str, Any]) -> RunConfig:
    values = dict(values)
    model = values.get("model")
    if isinstance(model, dict) and model.get("table1"):
        # start from the full-scale preset; explicit keys still override it
        base = to_dict(table1_config(model.get("variant", "ah-ctc")))
        base.update({k: v for k, v in model.items()})
        values["model"] = base
    return _build(RunConfig, values, "config")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return config_from_dict(values)


def to_dict(cfg) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def model_config_from_dict(values: dict[str, Any]) -> ModelConfig:
    return _build(ModelConfig, values, "model")
