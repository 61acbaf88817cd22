"""
Environment settings and experiment configs.

Experiment configs are flat key=value files (one key per ExperimentConfig field,
`#` comments allowed), read with python-dotenv and validated with pydantic.
"""

import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

load_dotenv()

logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")
DEFAULT_CONFIG = os.path.join(CONFIG_DIR, "default.cfg")

THREADS = max(1, int(os.getenv("RNLAB_THREADS", "1")))
OUTPUT_DIR = os.getenv("RNLAB_OUTPUT_DIR", "output")
LOG_LEVEL = os.getenv("RNLAB_LOG_LEVEL", "INFO")


class ConfigError(ValueError):
    """Malformed experiment config; the message carries <file>:<line>: <field>: <reason>."""

    def __init__(self, path: Union[str, Path], line: Optional[int], field: str, message: str):
        self.path = str(path)
        self.line = line
        self.field = field
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {field}: {message}")


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _blank_to_none(value):
    if isinstance(value, str) and value.strip().lower() in ("", "none", "learnable"):
        return None
    return value


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # data
    generator: Literal["channel_permuted", "shifted_gaussians", "two_moons", "csv"] = Field(
        default="channel_permuted", description="Synthetic task, or csv to read data_path"
    )
    data_path: Optional[str] = Field(default=None, description="Data CSV when generator=csv")
    classes: int = Field(default=4, ge=2, description="Number of classes K")
    features: int = Field(default=16, ge=2, description="Input dimension F")
    per_class: int = Field(default=500, ge=1, description="Samples per class and domain")
    shift: List[float] = Field(
        default_factory=lambda: [1.0], min_length=1, description="Target shift: one value for every feature, or one per feature"
    )
    scale: List[float] = Field(
        default_factory=lambda: [1.0], min_length=1, description="Target scale, one value or one per feature (shifted_gaussians)"
    )
    spread: float = Field(default=3.0, gt=0, description="Std of the class centers")
    permutation: str = Field(default="pairs", description="pairs, identity, or a comma-separated index list")
    samples: int = Field(default=400, ge=2, description="Samples per domain (two_moons)")
    rotation: float = Field(default=30.0, description="Target rotation in degrees (two_moons)")
    noise: float = Field(default=0.1, ge=0, description="Point noise (two_moons)")

    # model
    hidden: List[int] = Field(default_factory=lambda: [32, 16], min_length=1, description="Hidden widths")
    normalizer: str = Field(default="rn", description="bn, adabn, autodial, dsbn, dsbn_shared, tn, rn or identity")
    measure: Literal["neg_l2", "neg_l1", "neg_cosine"] = "neg_l2"
    group_size: int = Field(default=512, ge=1)
    fixed_gate: Optional[float] = Field(default=None, ge=0, le=1, description="Constant RN gate; empty = learnable")
    use_rc: bool = Field(default=True, description="False exchanges corresponding channels only")
    mix_init: float = Field(default=1.0, ge=0.5, le=1, description="AutoDIAL mixing weight at init")
    epsilon: float = Field(default=1e-5, gt=0)
    alpha: float = Field(default=0.1, gt=0, le=1, description="EMA momentum of running statistics")
    discriminator_hidden: int = Field(default=32, ge=1)

    # optimizer and schedule
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    decay_norm_params: bool = Field(default=False, description="Apply weight decay to gamma, beta and gates as well")
    norm_lr_scale: float = Field(default=1.0, ge=0, description="Learning-rate multiplier for normalizer parameters")
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=64, ge=1)
    dann_lambda: float = Field(default=1.0, ge=0, description="Adversarial weight; 0 trains source-only")
    anneal: bool = Field(default=False, description="Anneal lambda with 2/(1+exp(-10p))-1")

    seed: int = 0
    out: Optional[str] = None

    @field_validator("hidden", mode="before")
    @classmethod
    def split_hidden(cls, value):
        return _split_list(value)

    @field_validator("shift", "scale", mode="before")
    @classmethod
    def split_vector(cls, value):
        if isinstance(value, (int, float)):
            return [value]
        return _split_list(value)

    @field_validator("fixed_gate", "data_path", "out", mode="before")
    @classmethod
    def blank_is_none(cls, value):
        return _blank_to_none(value)

    @field_validator("normalizer")
    @classmethod
    def known_normalizer(cls, value: str) -> str:
        from src.norms import NORMALIZERS

        if value not in NORMALIZERS:
            raise ValueError(f"unknown normalizer {value!r}, expected one of {sorted(NORMALIZERS)}")
        return value

    @field_validator("permutation")
    @classmethod
    def permutation_syntax(cls, value: str) -> str:
        value = value.strip()
        if value in ("pairs", "identity"):
            return value
        try:
            [int(item) for item in value.split(",")]
        except ValueError:
            raise ValueError(f"expected pairs, identity or comma-separated integers, got {value!r}")
        return value

    @model_validator(mode="after")
    def csv_needs_path(self) -> "ExperimentConfig":
        if self.generator == "csv" and not self.data_path:
            raise ValueError("generator=csv needs data_path")
        return self

    @model_validator(mode="after")
    def vectors_match_features(self) -> "ExperimentConfig":
        for name in ("shift", "scale"):
            length = len(getattr(self, name))
            if length not in (1, self.features):
                raise ValueError(f"{name} needs 1 or {self.features} values, got {length}")
        return self

    def per_feature(self, name: str) -> Union[float, List[float]]:
        """shift or scale as the generators take it: a scalar when one value is given."""
        values = getattr(self, name)
        return values[0] if len(values) == 1 else list(values)

    def permutation_indices(self) -> List[int]:
        from src.data import pair_permutation

        if self.permutation == "pairs":
            return pair_permutation(self.features)
        if self.permutation == "identity":
            return list(range(self.features))
        return [int(item) for item in self.permutation.split(",")]

    def norm_options(self) -> Dict[str, object]:
        options: Dict[str, object] = {"measure": self.measure, "group_size": self.group_size, "use_rc": self.use_rc}
        if self.fixed_gate is not None:
            options["fixed_gate"] = self.fixed_gate
        options["mix_init"] = self.mix_init
        return options


def _key_lines(path: Path) -> Dict[str, int]:
    lines: Dict[str, int] = {}
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        if text.startswith("export "):
            text = text[len("export "):]
        if "=" not in text:
            raise ConfigError(path, number, text.split()[0], "expected key=value")
        lines[text.split("=", 1)[0].strip()] = number
    return lines


def parse_config(values: Dict[str, Optional[str]], path: Union[str, Path] = "<config>", lines: Optional[Dict[str, int]] = None) -> ExperimentConfig:
    lines = lines or {}
    fields = ExperimentConfig.model_fields
    for key in values:
        if key not in fields:
            raise ConfigError(path, lines.get(key), key, "unknown key")
    try:
        return ExperimentConfig(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        error = e.errors()[0]
        field = str(error["loc"][0]) if error["loc"] else "config"
        raise ConfigError(path, lines.get(field), field, error["msg"]) from None


def load_config(path: Union[str, Path], **overrides) -> ExperimentConfig:
    """Read and validate a key=value experiment config; overrides win over file values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(path, None, "config", "file not found")
    lines = _key_lines(path)
    values = dict(dotenv_values(path))
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    config = parse_config(values, path, lines)
    logger.debug("loaded %s: %s", path, config)
    return config


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={_format(getattr(config, key))}" for key in ExperimentConfig.model_fields]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path
