"""Configuration models and the flat ``key = value`` document loader.

Every hyper-parameter of a run lives in :class:`TrainConfig`; its defaults are the
values used for the published experiments. The typed views (:class:`LossWeights`,
:class:`AugmentConfig`, :class:`SynthesisConfig`, :class:`NetworkConfig`) are what
the individual modules consume.
"""
import hashlib
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Set, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from zxvad.errors import ConfigError

OUTPUT_ROOT_ENV = "ZXVAD_OUTPUT_ROOT"
DEVICE_ENV = "ZXVAD_DEVICE"

ExtractorArch = Literal["resnet18", "resnet34", "resnet50", "resnet152", "densenet161", "alexnet", "mnasnet1_0"]


class Command(str, Enum):
    PREPROCESS = "preprocess"
    TRAIN = "train"
    EVAL = "eval"
    SYNTH = "synth"
    RELEVANCY = "relevancy"
    REPORT = "report"


class LossWeights(BaseModel):
    """Weights of the three objectives and the ArcFace constants"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha_MEM: float = Field(0.0025, ge=0, description="Memory entropy weight inside L_BB")
    alpha_D: float = Field(0.05, ge=0, description="Adversarial term weight in L_G")
    alpha_N: float = Field(0.5, ge=0, description="Normalcy term weight in L_G")
    alpha_n: float = Field(1.0, ge=0, description="Normalcy loss weight in L_N")
    alpha_rn: float = Field(0.01, ge=0, description="Relative normalcy loss weight in L_N")
    alpha_aa: float = Field(1.0, ge=0, description="Attention affirmation loss weight in L_N")
    alpha_raa: float = Field(1.0, ge=0, description="Relative attention affirmation loss weight in L_N")
    arcface_scale: float = Field(64.0, ge=0, description="ArcFace scale s")
    arcface_margin: float = Field(math.radians(28.6), ge=0, description="ArcFace additive angular margin m (radians)")


class AugmentConfig(BaseModel):
    """Parameters of the normal-frame augmentation g(.)"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    brightness: float = Field(0.1, ge=0)
    contrast: float = Field(0.1, ge=0)
    saturation: float = Field(0.1, ge=0)
    hue: float = Field(0.1, ge=0, le=0.5)
    degrees: float = Field(360.0, ge=0)
    distortion_scale: float = Field(0.2, ge=0, le=1)
    p: float = Field(1.0, ge=0, le=1)


class SynthesisConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    extractor_arch: ExtractorArch = "resnet50"
    extractor_seed: int = 0
    extractor_input_size: int = Field(256, ge=32)
    threshold: float = Field(0.1, ge=0, le=1, description="Binarization threshold on the attention map")
    normalize_attention: bool = Field(True, description="Min-max normalize the attention map before thresholding")
    mixing: Literal["paste", "cutmix", "mixup"] = "paste"
    max_resample: int = Field(16, ge=0)


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    T: int = Field(4, ge=1)
    channels: int = 3
    image_size: int = Field(256, ge=16)
    gen_widths: Tuple[int, ...] = (64, 128, 256, 512)
    critic_widths: Tuple[int, ...] = (64, 128, 256, 512)
    memory_items: int = Field(2000, ge=1)
    shrink_threshold: float = Field(0.0005, ge=0)
    memory_addressing: Literal["spatial", "global"] = "spatial"
    use_memory: bool = True


class TrainConfig(BaseModel):
    """Flat configuration of a training / evaluation run"""
    model_config = ConfigDict(extra="forbid")

    # run
    seed: int = 0
    deterministic: bool = False
    device: str = "auto"
    num_workers: int = Field(0, ge=0)
    output_dir: Path = Path("runs/zxvad")
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)
    resume_from: Optional[Path] = None

    # optimisation
    lr_G: float = Field(0.0002, ge=0)
    lr_D: float = Field(0.00002, ge=0)
    lr_N: float = Field(0.00002, ge=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    batch_size: int = Field(8, ge=1)
    iterations: int = Field(5000, ge=1)
    T: int = Field(4, ge=1)
    image_size: int = Field(256, ge=16)

    # losses
    alpha_MEM: float = Field(0.0025, ge=0)
    alpha_D: float = Field(0.05, ge=0)
    alpha_N: float = Field(0.5, ge=0)
    alpha_n: float = Field(1.0, ge=0)
    alpha_rn: float = Field(0.01, ge=0)
    alpha_aa: float = Field(1.0, ge=0)
    alpha_raa: float = Field(1.0, ge=0)
    arcface_scale: float = Field(64.0, ge=0)
    arcface_margin: float = Field(math.radians(28.6), ge=0)
    normalcy_sigmoid: bool = False
    use_adversarial: bool = True

    # data
    train_manifest: Optional[Path] = None
    ti_manifest: Optional[Path] = None
    generator_source: Literal["vad", "ti"] = "vad"
    donor_source: Literal["vad", "ti"] = "vad"
    ti_fraction: float = Field(1.0, gt=0, le=1)

    # networks
    gen_widths: Tuple[int, ...] = (64, 128, 256, 512)
    critic_widths: Tuple[int, ...] = (64, 128, 256, 512)
    memory_items: int = Field(2000, ge=1)
    shrink_threshold: float = Field(0.0005, ge=0)
    memory_addressing: Literal["spatial", "global"] = "spatial"
    use_memory: bool = True

    # synthesis
    extractor_arch: ExtractorArch = "resnet50"
    extractor_seed: Optional[int] = None
    extractor_input_size: int = Field(256, ge=32)
    mask_threshold: float = Field(0.1, ge=0, le=1)
    normalize_attention: bool = True
    mixing: Literal["paste", "cutmix", "mixup"] = "paste"
    max_resample: int = Field(16, ge=0)

    # augmentation
    jitter_brightness: float = Field(0.1, ge=0)
    jitter_contrast: float = Field(0.1, ge=0)
    jitter_saturation: float = Field(0.1, ge=0)
    jitter_hue: float = Field(0.1, ge=0, le=0.5)
    affine_degrees: float = Field(360.0, ge=0)
    perspective_scale: float = Field(0.2, ge=0, le=1)
    augment_p: float = Field(1.0, ge=0, le=1)

    # scoring
    anomaly_orientation: Literal["inverse_psnr", "psnr"] = "inverse_psnr"

    @field_validator("gen_widths", "critic_widths", mode="before")
    @classmethod
    def _split_widths(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @field_validator("gen_widths", "critic_widths")
    @classmethod
    def _positive_widths(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or any(w < 1 for w in value):
            raise ValueError("widths must be a non-empty list of positive integers")
        return value

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha_MEM=self.alpha_MEM,
            alpha_D=self.alpha_D if self.use_adversarial else 0.0,
            alpha_N=self.alpha_N,
            alpha_n=self.alpha_n,
            alpha_rn=self.alpha_rn,
            alpha_aa=self.alpha_aa,
            alpha_raa=self.alpha_raa,
            arcface_scale=self.arcface_scale,
            arcface_margin=self.arcface_margin,
        )

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            brightness=self.jitter_brightness,
            contrast=self.jitter_contrast,
            saturation=self.jitter_saturation,
            hue=self.jitter_hue,
            degrees=self.affine_degrees,
            distortion_scale=self.perspective_scale,
            p=self.augment_p,
        )

    @property
    def synthesis_config(self) -> SynthesisConfig:
        return SynthesisConfig(
            extractor_arch=self.extractor_arch,
            extractor_seed=self.seed if self.extractor_seed is None else self.extractor_seed,
            extractor_input_size=self.extractor_input_size,
            threshold=self.mask_threshold,
            normalize_attention=self.normalize_attention,
            mixing=self.mixing,
            max_resample=self.max_resample,
        )

    @property
    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            T=self.T,
            image_size=self.image_size,
            gen_widths=self.gen_widths,
            critic_widths=self.critic_widths,
            memory_items=self.memory_items,
            shrink_threshold=self.shrink_threshold,
            memory_addressing=self.memory_addressing,
            use_memory=self.use_memory,
        )


class RelevancyConfig(BaseModel):
    """Inputs of a relevancy run, dumped next to its results"""
    model_config = ConfigDict(extra="forbid")

    labels_p: Path
    labels_q: Path
    embeddings: Optional[Path] = None
    hub_repo: Optional[str] = None
    provider: str = Field(description="source_id of the embedding provider that was used")
    output_dir: Path


class RunConfig(BaseModel):
    """What the command line asked for, before the config file is resolved"""
    model_config = ConfigDict(extra="forbid")

    command: Command
    config_path: Optional[Path] = None
    seed: Optional[int] = None
    deterministic: bool = False
    output_dir: Optional[Path] = None

    def overrides(self) -> Dict[str, Any]:
        """Command-line values that take precedence over the config file"""
        result: Dict[str, Any] = {}
        if self.seed is not None:
            result["seed"] = self.seed
        if self.deterministic:
            result["deterministic"] = True
        if self.output_dir is not None:
            result["output_dir"] = self.output_dir
        return result


def load_flat_document(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a flat ``key = value`` file; keys with empty values are dropped."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"Config file not found: {path}"])
    raw = dotenv_values(path, interpolate=False)
    return {key: value for key, value in raw.items() if value not in (None, "")}


def _format_errors(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        messages.append(f"{location}: {item['msg']} (got {item.get('input')!r})")
    return messages


def validate_model(model: type, values: Mapping[str, Any]) -> Any:
    try:
        return model.model_validate(dict(values))
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e


def validate_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
    """Resolve a flat config file (absent file means all defaults) into a TrainConfig.

    Unknown keys, type mismatches and out-of-range values are collected and raised
    together as one :class:`ConfigError`.
    """
    values: Dict[str, Any] = load_flat_document(path) if path is not None else {}
    values.update(overrides or {})
    return validate_model(TrainConfig, values)


def _render_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: BaseModel) -> str:
    return "".join(f"{name} = {_render_value(value)}\n" for name, value in config.model_dump().items())


def dump_config(config: BaseModel, path: Union[str, Path]) -> Path:
    """Write the resolved configuration in the same flat format it is read from"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_config(config), encoding="utf-8")
    return path


def config_hash(config: BaseModel, exclude: Optional[Set[str]] = None) -> str:
    return hashlib.sha256(config.model_dump_json(exclude=exclude).encode("utf-8")).hexdigest()


def output_root(default: Union[str, Path]) -> Path:
    """Output directory, re-rooted under ``$ZXVAD_OUTPUT_ROOT`` when that is set"""
    default = Path(default)
    root = os.getenv(OUTPUT_ROOT_ENV)
    if root and not default.is_absolute():
        return Path(root) / default
    return default
