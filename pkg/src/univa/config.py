"""Plain-text experiment configuration.

One INI file holds sections [world], [tokenizer], [model], [training],
[serving], [eval], [pipeline]. Unknown sections or keys are rejected. The
global seed lives in [pipeline]; sections that accept a seed default to
global + a fixed offset unless pinned explicitly, and the fully-resolved
config written next to outputs reloads to the exact same values.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field

from .model import ModelConfig, MoEConfig
from .simulator import WorldConfig
from .tokenizer import TokenizerFitConfig
from .training import TrainConfig

SEED_OFFSETS = {"world": 0, "tokenizer": 1, "model": 2, "training": 3}


@dataclass
class ModelSettings:
    embed_dim: int = 32
    heads: int = 4
    decoder_layers: int = 2
    encoder_layers: int = 2
    mor_rounds: int = 2
    max_seq_len: int = 64
    num_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 32
    bias_step: float = 0.05
    load_decay: float = 0.5
    seed: int = 0


@dataclass
class ServingSettings:
    beam_width: int = 8
    top_k: int = 10
    use_trie: bool = True


@dataclass
class EvalSettings:
    cutoffs: tuple = (1, 3, 5, 10)


@dataclass
class PipelineSettings:
    seed: int = 0
    requests: int = 200
    name: str = "experiment"


@dataclass
class ExperimentConfig:
    world: WorldConfig
    tokenizer: TokenizerFitConfig
    model: ModelSettings
    training: TrainConfig
    serving: ServingSettings
    eval: EvalSettings
    pipeline: PipelineSettings


SECTION_TYPES = {
    "world": WorldConfig,
    "tokenizer": TokenizerFitConfig,
    "model": ModelSettings,
    "training": TrainConfig,
    "serving": ServingSettings,
    "eval": EvalSettings,
    "pipeline": PipelineSettings,
}


def _coerce(raw: str, typ):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0])
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typ is tuple or origin is tuple:
        if not raw:
            return ()
        return tuple(int(x) for x in raw.split(","))
    raise ValueError(f"unsupported config field type {typ}")


def _build_section(cls, items: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in names:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except ValueError as e:
            raise ValueError(f"bad value for {section}.{key}: {e}") from e
    return kwargs


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate an INI config; `seed` overrides [pipeline] seed."""
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    for section in parser.sections():
        if section not in SECTION_TYPES:
            raise ValueError(f"unknown section [{section}]")

    raw_sections = {s: dict(parser.items(s)) for s in parser.sections()}
    kw = {s: _build_section(SECTION_TYPES[s], raw_sections.get(s, {}), s)
          for s in SECTION_TYPES}

    if seed is not None:
        kw["pipeline"]["seed"] = seed
    pipeline = PipelineSettings(**kw["pipeline"])
    for section, offset in SEED_OFFSETS.items():
        if "seed" not in kw[section]:
            kw[section]["seed"] = pipeline.seed + offset

    return ExperimentConfig(
        world=WorldConfig(**kw["world"]),
        tokenizer=TokenizerFitConfig(**kw["tokenizer"]),
        model=ModelSettings(**kw["model"]),
        training=TrainConfig(**kw["training"]),
        serving=ServingSettings(**kw["serving"]),
        eval=EvalSettings(**kw["eval"]),
        pipeline=pipeline,
    )


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def resolved_ini(cfg: ExperimentConfig) -> str:
    """Serialized form with every field explicit; reloads to equal values."""
    lines = []
    for section, typ in SECTION_TYPES.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(typ):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_resolved(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write(resolved_ini(cfg))


def build_model_config(settings: ModelSettings, level_vocab_sizes,
                       context_vocab_size: int) -> ModelConfig:
    """Combine static model settings with artifact-derived vocabularies."""
    moe = MoEConfig(num_experts=settings.num_experts, top_k=settings.top_k,
                    expert_hidden=settings.expert_hidden,
                    bias_step=settings.bias_step,
                    load_decay=settings.load_decay)
    return ModelConfig(
        embed_dim=settings.embed_dim, heads=settings.heads,
        sid_levels=len(level_vocab_sizes),
        level_vocab_sizes=list(level_vocab_sizes),
        context_vocab_size=context_vocab_size,
        decoder_layers=settings.decoder_layers,
        encoder_layers=settings.encoder_layers,
        mor_rounds=settings.mor_rounds, max_seq_len=settings.max_seq_len,
        moe=moe, seed=settings.seed)


def default_config(seed: int = 0) -> ExperimentConfig:
    """Desk-scale defaults; the seed offsets match load_config."""
    return ExperimentConfig(
        world=WorldConfig(seed=seed + SEED_OFFSETS["world"]),
        tokenizer=TokenizerFitConfig(seed=seed + SEED_OFFSETS["tokenizer"]),
        model=ModelSettings(seed=seed + SEED_OFFSETS["model"]),
        training=TrainConfig(seed=seed + SEED_OFFSETS["training"]),
        serving=ServingSettings(),
        eval=EvalSettings(),
        pipeline=PipelineSettings(seed=seed),
    )
