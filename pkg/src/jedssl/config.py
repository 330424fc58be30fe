"""Experiment configuration: YAML sections mapped onto the module dataclasses."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .frontend import CorpusSpec, FrontendConfig
from .model import DecoderConfig, EncoderConfig, ModelConfig
from .training import FinetuneConfig, MaskConfig, PretrainConfig

__all__ = ["ConfigError", "KMeansConfig", "EvalConfig", "ContinueConfig", "ExperimentConfig",
           "PRESETS", "load_preset", "load_config", "apply_overrides"]

PRESETS = ("desk-tiny", "desk-small", "paper-360h")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_utterances: int = 4
    n_test: int = 0
    min_duration: float = 0.6
    max_duration: float = 1.0
    n_latent_phones: int = 3
    min_segment: float = 0.08
    max_segment: float = 0.16
    snr_db: float = 20.0

    def spec(self, seed: int) -> CorpusSpec:
        """Generator spec covering train and test utterances together (one shared phone inventory)."""
        return CorpusSpec(n_utterances=self.n_utterances + self.n_test, min_duration=self.min_duration,
                          max_duration=self.max_duration, n_latent_phones=self.n_latent_phones,
                          min_segment=self.min_segment, max_segment=self.max_segment, snr_db=self.snr_db,
                          seed=seed)


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 8
    max_iters: int = 100


@dataclass(frozen=True)
class ContinueConfig:
    """Continued pre-training: trained encoder, fresh decoder."""
    max_steps: int = 200
    lr: float | None = None
    warmup_steps: int | None = None


@dataclass(frozen=True)
class EvalConfig:
    beam_size: int = 4
    split: str = "test"

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("eval: beam_size must be >= 1")
        if self.split not in ("train", "test"):
            raise ConfigError("eval: split must be 'train' or 'test'")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    precision: str = "f64"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig | None = field(default_factory=DecoderConfig)
    pretrain: dict = field(default_factory=dict)
    continue_pretrain: ContinueConfig = field(default_factory=ContinueConfig)
    finetune: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        # validates early; the concrete configs are built per stage
        self.pretrain_config()
        self.finetune_config()
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(frontend=self.frontend, encoder=self.encoder, decoder=self.decoder,
                           n_units=self.kmeans.k, n_chars=self.corpus.n_latent_phones)

    def pretrain_config(self, **over) -> PretrainConfig:
        kw = {"seed": self.seed, **self.pretrain, "mask": self.mask, **over}
        return PretrainConfig(**kw)

    def continue_config(self) -> PretrainConfig:
        c = self.continue_pretrain
        over = {"max_steps": c.max_steps, "use_decoder": True}
        if c.lr is not None:
            over["lr"] = c.lr
        if c.warmup_steps is not None:
            over["warmup_steps"] = c.warmup_steps
        return self.pretrain_config(**over)

    def finetune_config(self, **over) -> FinetuneConfig:
        return FinetuneConfig(**{"seed": self.seed, **self.finetune, **over})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "corpus": CorpusConfig,
    "frontend": FrontendConfig,
    "kmeans": KMeansConfig,
    "mask": MaskConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "continue_pretrain": ContinueConfig,
    "eval": EvalConfig,
}
_FREE_SECTIONS = {"pretrain": PretrainConfig, "finetune": FinetuneConfig}
_RESERVED = {"pretrain": {"seed", "mask"}, "finetune": {"seed"}}


def _check_keys(section: str, data: dict, cls) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)} - _RESERVED.get(section, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {unknown}; allowed: {sorted(allowed)}")


def from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}; allowed: {sorted(top)}")
    kw: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if key == "decoder" and value is None:
                kw[key] = None
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            _check_keys(key, value, _SECTIONS[key])
            try:
                kw[key] = _SECTIONS[key](**value)
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{key}: {e}") from None
        elif key in _FREE_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            _check_keys(key, value, _FREE_SECTIONS[key])
            kw[key] = value
        else:
            kw[key] = value
    try:
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {list(PRESETS)}")
    text = resources.files("jedssl.presets").joinpath(f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def load_config(source: str | Path) -> dict:
    """Raw config mapping from a preset name or a YAML path."""
    if str(source) in PRESETS:
        return load_preset(str(source))
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config file {path} not found (presets: {list(PRESETS)})")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data or {}


def apply_overrides(data: dict, **flags) -> dict:
    """Flags win over file values; ``None`` means not given."""
    out = copy.deepcopy(data)
    if flags.get("seed") is not None:
        out["seed"] = flags["seed"]
    if flags.get("precision") is not None:
        out["precision"] = flags["precision"]
    if flags.get("mode") is not None:
        out.setdefault("finetune", {})["mode"] = flags["mode"]
    return out
