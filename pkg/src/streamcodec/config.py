"""Experiment configuration: strict schema, YAML I/O, presets, and hashing.

A config file fully determines a run. Unknown keys are rejected, and the
sha256 hash of the canonical form is embedded in every checkpoint,
bitstream, and report so mismatched artifacts can be refused.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import yaml

from .audio import MelConfig
from .errors import ConfigError

CONFIG_VERSION = 1

GENERATOR_VARIANTS = ("sym", "v0", "v1", "v2")
TRAIN_MODES = ("symAD", "symAD_star", "asymAD", "vocoder", "soundstream_baseline")
GAN_FLAVORS = ("hinge", "least_squares")


@dataclass
class EncoderConfig:
    """Strided causal encoder: residual units then a downsampling conv per stage."""

    downsample_factors: Tuple[int, ...] = (2, 2, 3, 5, 5)
    base_channels: int = 16
    num_blocks_per_stage: int = 3
    input_kernel: int = 7
    residual_kernel: int = 7
    activation: str = "LeakyReLU"
    activation_params: Dict[str, float] = field(
        default_factory=lambda: {"negative_slope": 0.2}
    )

    @property
    def hop(self) -> int:
        return math.prod(self.downsample_factors)

    @property
    def out_channels(self) -> int:
        return self.base_channels * 2 ** len(self.downsample_factors)

    def validate(self) -> None:
        if any(f < 1 for f in self.downsample_factors):
            raise ConfigError("encoder.downsample_factors must all be >= 1")
        if self.base_channels < 1 or self.num_blocks_per_stage < 0:
            raise ConfigError("encoder channel/block counts must be positive")


@dataclass
class DecoderConfig:
    """Upsampling decoder; ``variant`` selects the block type per stage.

    sym      mirror of the encoder (residual units, dilations 1/3/9)
    v0       multi-receptive-field fusion, branch kernels 3/7/11
    v1, v2   the three branches share one kernel (11 resp. 3) and run as a
             single grouped convolution
    """

    variant: str = "sym"
    channels: int = 512
    upsample_factors: Tuple[int, ...] = (5, 5, 3, 2, 2)
    input_kernel: int = 7
    output_kernel: int = 7
    residual_kernel: int = 7
    num_blocks_per_stage: int = 3
    branch_kernels: Tuple[int, ...] = (3, 7, 11)
    group_kernel: int = 0  # 0 -> derived from variant (v1: 11, v2: 3)
    num_groups: int = 3
    branch_dilations: Tuple[int, ...] = (1, 3)
    min_channels: int = 8
    activation: str = "ELU"
    activation_params: Dict[str, float] = field(default_factory=dict)

    @property
    def hop(self) -> int:
        return math.prod(self.upsample_factors)

    def resolved_group_kernel(self) -> int:
        if self.group_kernel > 0:
            return self.group_kernel
        return {"v1": 11, "v2": 3}.get(self.variant, 3)

    def validate(self) -> None:
        if self.variant not in GENERATOR_VARIANTS:
            raise ConfigError(
                f"decoder.variant must be one of {GENERATOR_VARIANTS}, got {self.variant!r}"
            )
        if self.variant == "v0" and len(set(self.branch_kernels)) != len(self.branch_kernels):
            raise ConfigError("decoder.branch_kernels must be distinct for v0")
        if any(f < 1 for f in self.upsample_factors):
            raise ConfigError("decoder.upsample_factors must all be >= 1")


@dataclass
class QuantizerConfig:
    """Projector + residual VQ with EMA codebook learning."""

    num_books: int = 8
    book_size: int = 1024
    code_dim: int = 64
    decay: float = 0.99
    epsilon: float = 1e-5
    dead_code_threshold: float = 1.0
    reseed_interval: int = 1000
    kmeans_iters: int = 10

    @property
    def bits_per_code(self) -> int:
        return max(1, (self.book_size - 1).bit_length())

    def validate(self) -> None:
        if self.num_books < 1 or self.book_size < 1 or self.code_dim < 1:
            raise ConfigError("quantizer sizes must be positive")
        if not (0.0 < self.decay < 1.0):
            raise ConfigError("quantizer.decay must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("quantizer.epsilon must be positive")


@dataclass
class DiscriminatorConfig:
    """Discriminator ensemble selection and per-family widths."""

    kinds: Tuple[str, ...] = ("mpd", "msd")
    periods: Tuple[int, ...] = (2, 3, 5, 7, 11)
    mpd_channels: int = 32
    mpd_max_channels: int = 1024
    mpd_downsample_scales: Tuple[int, ...] = (3, 3, 3, 3, 1)
    mpd_kernel: int = 5
    msd_scales: int = 3
    msd_channels: int = 16
    msd_max_channels: int = 1024
    msd_kernels: Tuple[int, ...] = (15, 41, 5, 3)
    msd_downsample_scales: Tuple[int, ...] = (2, 2, 4, 4, 1)
    msd_groups: int = 4
    stftd_fft_size: int = 1024
    stftd_hop: int = 256
    stftd_channels: int = 32
    leaky_slope: float = 0.2

    def validate(self) -> None:
        for kind in self.kinds:
            if kind not in ("mpd", "msd", "stftd"):
                raise ConfigError(f"unknown discriminator kind {kind!r}")
        if any(p < 1 for p in self.periods):
            raise ConfigError("discriminator periods must be >= 1")


@dataclass
class LossWeights:
    """Weights of the composite generator loss."""

    lambda_fm: float = 2.0
    lambda_mel: float = 45.0
    lambda_vq: float = 1.0
    gan_flavor: str = "least_squares"

    def validate(self) -> None:
        for name in ("lambda_fm", "lambda_mel", "lambda_vq"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"losses.{name} must be finite and nonnegative")
        if self.gan_flavor not in GAN_FLAVORS:
            raise ConfigError(f"losses.gan_flavor must be one of {GAN_FLAVORS}")


@dataclass
class TrainSchedule:
    """Iteration counts, optimizer settings, and sampling geometry."""

    mode: str = "symAD"
    stage1_iters: int = 200_000
    stage2_iters: int = 500_000
    batch_size: int = 16
    segment_length: int = 24_000
    g_lr: float = 1e-4
    d_lr: float = 2e-4
    adam_betas: Tuple[float, float] = (0.8, 0.99)
    lr_decay_gamma: float = 0.5
    save_every: int = 10_000
    log_every: int = 1

    def validate(self) -> None:
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"schedule.mode must be one of {TRAIN_MODES}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.batch_size < 1 or self.segment_length < 1:
            raise ConfigError("batch_size and segment_length must be positive")


@dataclass
class PathsConfig:
    train_corpus: str = ""
    valid_corpus: str = ""
    output_dir: str = ""

    def validate(self) -> None:
        pass


@dataclass
class ExperimentConfig:
    """Top-level run description; owns every module's configuration."""

    version: int = CONFIG_VERSION
    seed: int = 1234
    sample_rate: int = 48_000
    paths: PathsConfig = field(default_factory=PathsConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminators: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)

    @property
    def hop(self) -> int:
        return self.encoder.hop

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(
                f"config version {self.version} not supported (expected {CONFIG_VERSION})"
            )
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        for sub in (
            self.encoder,
            self.quantizer,
            self.decoder,
            self.discriminators,
            self.losses,
            self.schedule,
        ):
            sub.validate()
        if tuple(reversed(self.encoder.downsample_factors)) != tuple(
            self.decoder.upsample_factors
        ):
            raise ConfigError(
                "decoder.upsample_factors must be the reverse of encoder.downsample_factors"
            )
        if self.schedule.segment_length % self.hop != 0:
            raise ConfigError("schedule.segment_length must be a multiple of the hop")
        try:
            self.mel.validate_rate(self.sample_rate)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(value, ftype, path):
    origin = getattr(ftype, "__origin__", None)
    if dataclasses.is_dataclass(ftype):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _from_dict(ftype, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        elem = ftype.__args__[0]
        return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return dict(value)
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    return value


def _from_dict(cls, data: dict, path: str = "config"):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name in data:
            kwargs[name] = _coerce(data[name], _resolve_type(cls, f), f"{path}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _resolve_type(cls, f):
    hints = getattr(cls, "__streamcodec_hints__", None)
    if hints is None:
        import typing

        hints = typing.get_type_hints(cls)
        cls.__streamcodec_hints__ = hints
    return hints[f.name]


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, data, "config")
    cfg.validate()
    return cfg


def config_echo_dict(cfg: ExperimentConfig) -> dict:
    """Config as embedded in artifacts: machine-local paths blanked."""
    plain = config_to_dict(cfg)
    plain["paths"] = {f.name: "" for f in dataclasses.fields(PathsConfig)}
    return plain


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form (paths excluded: they are
    machine-local and do not affect model compatibility)."""
    plain = config_to_dict(cfg)
    plain.pop("paths", None)
    canon = json.dumps(plain, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


def preset(name: str) -> ExperimentConfig:
    """Named preset configs: 'full-48k' is the full-scale schedule,
    'desk-24k' a small configuration for CI-scale runs."""
    if name == "full-48k":
        return ExperimentConfig()
    if name == "desk-24k":
        return ExperimentConfig(
            sample_rate=24_000,
            mel=MelConfig(
                fft_size=2048,
                hop_length=300,
                win_length=1200,
                num_mels=80,
                fmin=0.0,
                fmax=12_000.0,
                log_floor=1e-5,
            ),
            encoder=EncoderConfig(base_channels=8, num_blocks_per_stage=2),
            decoder=DecoderConfig(variant="sym", channels=256, num_blocks_per_stage=2),
            discriminators=DiscriminatorConfig(
                mpd_channels=8,
                mpd_max_channels=64,
                msd_channels=8,
                msd_max_channels=64,
            ),
            schedule=TrainSchedule(
                stage1_iters=5_000,
                stage2_iters=10_000,
                batch_size=4,
                segment_length=7_200,
                save_every=1_000,
            ),
        )
    if name == "desk-24k-vocoder":
        cfg = preset("desk-24k")
        cfg.schedule.mode = "vocoder"
        cfg.decoder.variant = "v2"
        cfg.decoder.channels = 128
        return cfg
    raise ConfigError(f"unknown preset {name!r} (have: full-48k, desk-24k, desk-24k-vocoder)")


def vocoder_variant(cfg: ExperimentConfig, variant: str, channels: Optional[int] = None) -> ExperimentConfig:
    """Derive a vocoder-mode config from a base config."""
    out = config_from_dict(config_to_dict(cfg))
    out.schedule.mode = "vocoder"
    out.decoder.variant = variant
    if channels is not None:
        out.decoder.channels = channels
    out.validate()
    return out
