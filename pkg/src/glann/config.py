"""Pipeline configuration: nested dataclasses with a JSON text form.

The text form is plain JSON with one object per section::

    {"dataset": {"kind": "idx", "path": "train-images-idx3-ubyte", ...},
     "latent_dim": 64, "noise_dim": 64,
     "glo": {"epochs": 500, ..., "loss": {"kind": "perceptual", ...}},
     "imle": {...}, "pixel_imle": {...}, "evaluation": {...},
     "output_dir": "runs", "seed": 0}

Every key is optional; missing keys take the dataclass defaults, unknown keys
are rejected. ``apply_overrides`` takes dotted ``key=value`` strings
(``glo.epochs=20``), values parsed as JSON when possible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ConfigurationError
from .glo import GloTrainConfig
from .imle import ImleTrainConfig

DETERMINISM_ENV = "GLANN_DETERMINISTIC"


@dataclass
class DatasetConfig:
    kind: str = "idx"
    path: str = ""
    size: int | None = None
    limit: int | None = None
    subset_seed: int = 0
    # which images serve as the FID/PRD reference set; only "train" is built in
    reference: str = "train"
    labels_path: str | None = None


@dataclass
class EvalConfig:
    embedder: str = "random-conv"
    embedder_dim: int = 64
    embedder_seed: int = 0
    classifier_epochs: int = 5
    n: int = 10000
    num_bins: int = 20
    num_angles: int = 1001
    seed: int = 0


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    latent_dim: int = 64
    noise_dim: int = 64
    generator_arch: str = "infogan"
    # "normal": seeded normal draws projected to the sphere; "pca": principal-component scores
    latent_init: str = "normal"
    mapper_hidden: int = 128
    # normalize mapper outputs onto the sphere before decoding
    project_mapper_outputs: bool = True
    glo: GloTrainConfig = field(default_factory=GloTrainConfig)
    imle: ImleTrainConfig = field(default_factory=ImleTrainConfig)
    pixel_imle: ImleTrainConfig = field(default_factory=lambda: ImleTrainConfig(epochs=0))
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    grid_size: int = 64
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.latent_init not in ("normal", "pca"):
            raise ValueError(f"latent_init must be 'normal' or 'pca', got {self.latent_init!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _build(cls, data, "")

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text())

    def hash(self) -> str:
        """Digest of everything that affects results (``output_dir`` excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {where or '<root>'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown config keys in {where or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        typ = hints[name]
        if dataclasses.is_dataclass(typ) and isinstance(value, dict):
            value = _build(typ, value, f"{where}.{name}".lstrip("."))
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {where or 'config'}: {exc}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Return a new config with dotted ``key=value`` overrides applied."""
    data = cfg.to_dict()
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigurationError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return PipelineConfig.from_dict(data)


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISM_ENV, "0").lower() not in ("", "0", "false", "no")


def configure_determinism(enabled: bool | None = None) -> bool:
    """Turn on deterministic torch kernels when ``GLANN_DETERMINISTIC`` is set."""
    enabled = deterministic_mode() if enabled is None else enabled
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    return enabled
