"""Experiment configuration: one JSON file, overridable by CLI flags.

The top-level ``seed`` is the master seed: commands derive every per-volume,
training and detection seed from it with ``derive_seed``, so a whole
experiment is reproducible from one number and benchmark rows that share the
master seed see identical datasets and initial poses.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import InferenceConfig
from .phantom import PhantomSpec
from .training import TrainConfig

HEAD_CHOICES = ("M1", "M2", "M3", "M4", "M4+")
ORACLE_KINDS = ("exact", "capped", "noisy")

# seed-derivation tags
_TAG_PHANTOM = 1
_TAG_TRAIN = 2
_TAG_DETECT = 3
_TAG_MODEL = 4
_TAG_ORACLE = 5


class ConfigError(ValueError):
    """Invalid configuration or command-line usage (exit code 2)."""


def derive_seed(master: int, *parts: int) -> int:
    """Stable 64-bit child seed from a master seed and integer tags."""
    ss = np.random.SeedSequence([int(master), *(int(p) for p in parts)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def phantom_seed(master: int, index: int) -> int:
    return derive_seed(master, _TAG_PHANTOM, index)


def train_stream_seed(master: int) -> int:
    return derive_seed(master, _TAG_TRAIN)


def detect_seed(master: int, index: int) -> int:
    return derive_seed(master, _TAG_DETECT, index)


def model_init_seed(master: int) -> int:
    return derive_seed(master, _TAG_MODEL)


def oracle_seed(master: int, index: int) -> int:
    return derive_seed(master, _TAG_ORACLE, index)


def heads_flags(heads: str) -> tuple[bool, bool, bool]:
    """(translation confidence, rotation confidence, triplet input) per label."""
    table = {
        "M1": (False, False, False),
        "M2": (True, False, False),
        "M3": (False, True, False),
        "M4": (True, True, False),
        "M4+": (True, True, True),
    }
    if heads not in table:
        raise ConfigError(f"unknown heads selection {heads!r}; expected one of {HEAD_CHOICES}")
    return table[heads]


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "exact"
    cap_translation: float = 4.0
    cap_rotation_deg: float = 5.0
    sigma_t: float = 0.5
    sigma_theta_deg: float = 0.5
    label_eps: float = 0.1
    with_probs: bool = False

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS:
            raise ConfigError(f"unknown oracle kind {self.kind!r}; expected one of {ORACLE_KINDS}")


@dataclass(frozen=True)
class ExperimentConfig:
    volumes_dir: str = "volumes"
    model_path: str = "model.itn"
    output_dir: str = ""
    volume_count: int = 20
    eval_count: int = 5
    mode: str = "quat"
    heads: str = "M4"
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.heads not in HEAD_CHOICES:
            raise ConfigError(f"unknown heads selection {self.heads!r}")
        if self.mode not in ("quat", "euler", "matrix", "anchors"):
            raise ConfigError(f"unknown representation mode {self.mode!r}")
        if self.volume_count < 1 or self.eval_count < 0:
            raise ConfigError("volume_count must be >= 1 and eval_count >= 0")

    # --- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            kwargs = dict(raw)
            if "phantom" in kwargs:
                kwargs["phantom"] = PhantomSpec.from_json(json.dumps(kwargs["phantom"]))
            if "train" in kwargs:
                kwargs["train"] = TrainConfig(**kwargs["train"])
            if "inference" in kwargs:
                kwargs["inference"] = InferenceConfig(**kwargs["inference"])
            if "oracle" in kwargs:
                kwargs["oracle"] = OracleConfig(**kwargs["oracle"])
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_json(path.read_text())

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        """New config with the given top-level fields replaced (flags win)."""
        updates = {k: v for k, v in kwargs.items() if v is not None}
        oracle_kind = updates.pop("oracle_kind", None)
        cfg = dataclasses.replace(self, **updates) if updates else self
        if oracle_kind is not None:
            cfg = dataclasses.replace(cfg, oracle=dataclasses.replace(cfg.oracle, kind=oracle_kind))
        return cfg
