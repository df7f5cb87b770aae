"""Experiment configuration: nested dataclasses loaded from JSON.

Unknown keys are rejected at every level, and every command writes the fully
resolved configuration next to its outputs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError, ContractViolation
from .inversion import InversionConfig
from .sampler import GuidanceConfig
from .training import TrainConfig


@dataclass
class DatasetConfig:
    seed: int = 0
    count: int = 24
    size: int = 256
    patch: int = 32
    levels: int = 4
    cap_side: int = 4
    # Held-out images for validation, probes and acceptance checks.
    val_seed: int = 100
    val_count: int = 8


@dataclass
class CodecConfig:
    kind: str = "learned"  # "learned" or "orthogonal"
    latent_channels: int = 4
    f_vae: int = 4
    hidden: int = 64
    seed: int = 0
    steps: int = 1200
    lr: float = 2e-3
    warmup: int = 100
    batch: int = 32
    adjoint_weight: float = 0.003

    def __post_init__(self):
        if self.kind not in ("learned", "orthogonal"):
            raise ConfigError(f"unknown codec kind {self.kind!r}")


@dataclass
class DenoiserConfig:
    channels: tuple = (32, 64)
    temb_dim: int = 64
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)


@dataclass
class SummarizerConfig:
    hidden: int = 64
    heads: int = 4
    layers: int = 4
    mask_padding: bool = False
    seed: int = 0


@dataclass
class CdmConfig:
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    seed: int = 0


def _ldm_train() -> TrainConfig:
    return TrainConfig(steps=3000)


def _cdm_train() -> TrainConfig:
    return TrainConfig(steps=2000, p_drop=0.0, rebalance=True, ema=0.999)


@dataclass
class TrainingConfig:
    ldm: TrainConfig = field(default_factory=_ldm_train)
    cdm: TrainConfig = field(default_factory=_cdm_train)


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    summarizer: SummarizerConfig = field(default_factory=SummarizerConfig)
    cdm: CdmConfig = field(default_factory=CdmConfig)
    sampler: GuidanceConfig = field(default_factory=GuidanceConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def arch(self) -> dict:
        """Constructor arguments for the networks, stored in checkpoints."""
        levels = self.dataset.levels
        return {
            "denoiser": {
                "latent_channels": self.codec.latent_channels,
                "channels": list(self.denoiser.channels),
                "ctx_dim": self.summarizer.hidden,
                "n_tokens": self.dataset.cap_side**2 + 1,
                "temb_dim": self.denoiser.temb_dim,
                "heads": self.denoiser.heads,
                "seed": self.denoiser.seed,
            },
            "summarizer": {
                "hidden": self.summarizer.hidden,
                "heads": self.summarizer.heads,
                "layers": self.summarizer.layers,
                "n_scales": levels,
                "cap": self.dataset.cap_side**2,
                "mask_padding": self.summarizer.mask_padding,
                "seed": self.summarizer.seed,
            },
            "cdm": {
                "n_tokens": self.dataset.cap_side**2 + 1,
                "token_dim": self.summarizer.hidden,
                "hidden": self.cdm.hidden,
                "layers": self.cdm.layers,
                "heads": self.cdm.heads,
                "n_scales": levels,
                "seed": self.cdm.seed,
            },
        }


def _build(cls, data, path: str, base=None):
    """``cls`` from ``data`` layered over ``base`` (an instance supplying defaults)."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {} if base is None else {n: getattr(base, n) for n in fields}
    for name, value in data.items():
        default = _nested_default(cls, name)
        where = f"{path}.{name}" if path else name
        if default is not None:
            inner = getattr(base, name) if base is not None else default
            kwargs[name] = _build(type(default), value, where, inner)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ContractViolation, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def _nested_default(cls, name: str):
    f = next(f for f in dataclasses.fields(cls) if f.name == name)
    if f.default_factory is not dataclasses.MISSING:
        sample = f.default_factory()
        if dataclasses.is_dataclass(sample):
            return sample
    return None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Config from a JSON file (or defaults) plus ``section.key=value`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        _apply_override(data, item)
    return config_from_dict(data)


def _apply_override(data: dict, item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = value


def resolve_seed(explicit: int | None, fallback: int = 0) -> int:
    """Explicit seed, else ``ZOOMSTACK_SEED``, else ``fallback``."""
    if explicit is not None:
        return int(explicit)
    env = os.environ.get("ZOOMSTACK_SEED")
    if env is None or env == "":
        return fallback
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"ZOOMSTACK_SEED={env!r} is not an integer") from exc


def write_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
