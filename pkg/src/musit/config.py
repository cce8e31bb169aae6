"""Run configuration: one JSON document covering every module's defaults.

Section schemas are generated from the modules' own config dataclasses so
defaults live in one place. Unknown keys are rejected at every level.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, create_model

from .audio import MelConfig
from .backbone import BackboneConfig
from .corpus import CorpusConfig
from .diffusion import SamplerConfig
from .encoder import EncoderConfig
from .pipeline import DEFAULT_SAMPLER, GenerateConfig, TrainConfig
from .vae import VaeConfig

STRICT = ConfigDict(extra="forbid", frozen=True)


class ConfigError(ValueError):
    pass


def _section(dc, exclude: tuple[str, ...] = (), overrides: dict | None = None):
    """Pydantic model mirroring dataclass ``dc`` (minus ``exclude``)."""
    hints = typing.get_type_hints(dc)
    fields = {}
    for f in dataclasses.fields(dc):
        if f.name in exclude:
            continue
        default = (overrides or {}).get(f.name, f.default)
        fields[f.name] = (hints[f.name], default)
    model = create_model(f"{dc.__name__}Section", __config__=STRICT, **fields)
    model.build = lambda self: dc(**self.model_dump())  # noqa: E731
    return model


CorpusSection = _section(CorpusConfig)
MelSection = _section(MelConfig)
VaeSection = _section(VaeConfig, exclude=("bins",))
EncoderSection = _section(EncoderConfig, exclude=("vocab", "bins"))
BackboneSection = _section(BackboneConfig, exclude=("d_lat", "d_e", "prediction_target"))


class SamplerSection(BaseModel):
    """Sampler overrides; an unset ``kind`` means the path's own sampler."""

    model_config = STRICT
    kind: typing.Literal["ddim", "ode_heun", "sde_euler"] | None = None
    steps: int = 50
    t_min: float = 1e-3
    diffusion: typing.Literal["sigma", "zero"] = "sigma"


GenerateSection = _section(GenerateConfig)

_PHASE_EXCLUDE = ("phase", "path", "seed", "float_mode")
VaeTrainSection = _section(TrainConfig, _PHASE_EXCLUDE, {"steps": 1000, "lr": 2e-3})
EncoderTrainSection = _section(TrainConfig, _PHASE_EXCLUDE, {"steps": 400, "lr": 1e-3})
PretrainSection = _section(TrainConfig, _PHASE_EXCLUDE, {"steps": 1000, "lr": 1e-3})
FinetuneSection = _section(TrainConfig, _PHASE_EXCLUDE, {"steps": 1000, "lr": 5e-4, "lyric_dropout": 0.5})


class TrainSection(BaseModel):
    model_config = STRICT
    vae: VaeTrainSection = Field(default_factory=VaeTrainSection)
    encoder: EncoderTrainSection = Field(default_factory=EncoderTrainSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)


class EvalSection(BaseModel):
    model_config = STRICT
    n_generations: int = Field(16, ge=1)


class RunConfig(BaseModel):
    model_config = STRICT
    seed: int = 0
    path: typing.Literal["mudit", "musit"] = "musit"
    float_mode: typing.Literal["f32", "f64"] = "f32"
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    corpus_size: int = Field(8, ge=1)
    mel: MelSection = Field(default_factory=MelSection)
    vae: VaeSection = Field(default_factory=VaeSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    backbone: BackboneSection = Field(default_factory=BackboneSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sampler: SamplerSection | None = None
    generate: GenerateSection = Field(default_factory=GenerateSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    # -- builders -------------------------------------------------------------

    def mel_config(self) -> MelConfig:
        return self.mel.build()

    def vae_config(self) -> VaeConfig:
        return VaeConfig(bins=self.mel.bins, **self.vae.model_dump())

    def encoder_config(self, vocab) -> EncoderConfig:
        return EncoderConfig(vocab=tuple(vocab), bins=self.mel.bins, **self.encoder.model_dump())

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.backbone.model_dump())

    def train_config(self, phase: str) -> TrainConfig:
        section = {"vae": self.train.vae, "encoder": self.train.encoder,
                   "diffusion_pretrain": self.train.pretrain, "diffusion_finetune": self.train.finetune}[phase]
        return TrainConfig(phase=phase, path=self.path, seed=self.seed, float_mode=self.float_mode,
                           **section.model_dump())

    def sampler_config(self) -> SamplerConfig:
        """The sampler section; ``kind`` falls back to the path's own sampler when unset."""
        fields = {} if self.sampler is None else self.sampler.model_dump()
        if fields.get("kind") is None:
            fields["kind"] = DEFAULT_SAMPLER[self.path]
        return SamplerConfig(seed=self.seed, **fields)

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _set_path(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        if d.get(k) is None:
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """File values first, then ``overrides`` (dotted keys); flags win over the file."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
    for k, v in (overrides or {}).items():
        if v is not None:
            _set_path(data, k, v)
    try:
        cfg = RunConfig.model_validate(data)
        # run the dataclasses' own invariant checks
        cfg.mel_config(), cfg.vae_config(), cfg.backbone_config(), cfg.sampler_config()
        for phase in ("vae", "encoder", "diffusion_pretrain", "diffusion_finetune"):
            cfg.train_config(phase)
        return cfg
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
