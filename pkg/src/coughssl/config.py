"""Experiment configuration: INI-style ``key = value`` files with sections.

Every key has a default (d = 64, dropout 0.2, lr 1e-3, downstream batch
128, 96-frame clips, 64 mel bins, threshold 0.5). The contrastive batch
defaults to the desk-scale 64; full-scale runs use 1024.

Sections map onto dataclasses::

    [run]          phase, seeds, precision, use_pretrained
    [paths]        corpus_dir, manifest, pretrained, model
    [features]     FeatureConfig
    [encoder]      EncoderConfig
    [contrastive]  ContrastiveConfig (mask rate key: pretrain_mask_rate)
    [downstream]   DownstreamConfig (mask rate key: downstream_mask_rate)
    [optimizer]    OptimizerConfig
    [synth]        SyntheticCorpusSpec
    [benchmark]    n_trials, warmup, mask_rates
    [grid]         one comma-separated list per axis, plus jobs
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .contrastive import ContrastiveConfig
from .diffcore import OptimizerConfig, config_hash
from .downstream import DownstreamConfig
from .encoder import EncoderConfig
from .errors import InvalidConfig
from .evalbench.synth import SyntheticCorpusSpec, desk_corpus_spec
from .features import FeatureConfig

PHASES = ("pretrain", "finetune", "evaluate", "benchmark", "synth", "grid")


@dataclass(frozen=True)
class RunConfig:
    phase: str = "pretrain"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    precision: str = "float32"
    use_pretrained: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InvalidConfig(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not self.seeds:
            raise InvalidConfig("seeds must be non-empty")
        if self.precision not in ("float32", "float64"):
            raise InvalidConfig("precision must be float32 or float64")


@dataclass(frozen=True)
class PathsConfig:
    """Empty values fall back to locations inside the run directory."""

    corpus_dir: str = ""
    manifest: str = ""
    pretrained: str = ""
    model: str = ""


@dataclass(frozen=True)
class BenchmarkConfig:
    n_trials: int = 200
    warmup: int = 10
    mask_rates: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)


GRID_AXES = {
    "pretrain_mask_rate": ("contrastive", "mask_rate"),
    "downstream_mask_rate": ("downstream", "mask_rate"),
    "similarity": ("contrastive", "metric"),
    "arch": ("downstream", "arch"),
    "freeze": ("downstream", "freeze_encoder"),
    "encoder_kind": ("encoder", "encoder_kind"),
    "pretrain": ("run", "use_pretrained"),
    "d_model": ("encoder", "d_model"),
    "dropout": ("encoder", "dropout"),
    "label_budget": ("downstream", "label_budget"),
}


@dataclass(frozen=True)
class GridConfig:
    axes: tuple[tuple[str, tuple[str, ...]], ...] = ()
    jobs: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    synth: SyntheticCorpusSpec = field(default_factory=desk_corpus_spec)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def hash(self) -> str:
        return config_hash(to_dict(self))

    def with_overrides(self, overrides: dict[str, object]) -> ExperimentConfig:
        """Apply ``{"section.field": value}`` or grid-axis-name overrides."""
        cfg = self
        for key, value in overrides.items():
            section, name = GRID_AXES.get(key) or _split_key(key)
            sub = getattr(cfg, section)
            parsed = _parse_field(sub, name, value) if isinstance(value, str) else value
            cfg = replace(cfg, **{section: replace(sub, **{name: parsed})})
        return cfg


SECTION_ALIASES = {
    "contrastive": {"pretrain_mask_rate": "mask_rate"},
    "downstream": {"downstream_mask_rate": "mask_rate"},
}


def _split_key(key: str) -> tuple[str, str]:
    if "." not in key:
        raise InvalidConfig(f"unknown setting {key!r}")
    section, name = key.split(".", 1)
    return section, name


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


# -- value parsing -----------------------------------------------------------------

def _field_types(cls) -> dict[str, object]:
    import sys

    module = sys.modules[cls.__module__]
    return typing.get_type_hints(cls, globalns=vars(module))


def _parse_value(tp, raw: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if raw.lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse_value(inner[0], raw)
    if origin is tuple:
        items = [s for s in (p.strip() for p in raw.split(",")) if s]
        elem = args[0] if args else str
        return tuple(_parse_value(elem, s) for s in items)
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise InvalidConfig(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _parse_field(obj, name: str, raw: str):
    types = _field_types(type(obj))
    if name not in types:
        raise InvalidConfig(f"unknown key {name!r} for [{type(obj).__name__}]")
    try:
        return _parse_value(types[name], raw)
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {name}: {raw!r}") from exc


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


# -- files -------------------------------------------------------------------------

def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfig(f"config syntax error: {exc}") from exc
    cfg = base or ExperimentConfig()
    for section in parser.sections():
        if section == "grid":
            axes, jobs = [], cfg.grid.jobs
            for key, raw in parser.items(section):
                if key == "jobs":
                    jobs = int(raw)
                    continue
                if key not in GRID_AXES and "." not in key:
                    raise InvalidConfig(f"unknown grid axis {key!r}; choose from {sorted(GRID_AXES)}")
                axes.append((key, tuple(v.strip() for v in raw.split(",") if v.strip())))
            cfg = replace(cfg, grid=GridConfig(tuple(axes), jobs))
            continue
        if not hasattr(cfg, section):
            raise InvalidConfig(f"unknown section [{section}]")
        sub = getattr(cfg, section)
        aliases = SECTION_ALIASES.get(section, {})
        updates = {}
        for key, raw in parser.items(section):
            name = aliases.get(key, key)
            updates[name] = _parse_field(sub, name, raw)
        try:
            cfg = replace(cfg, **{section: replace(sub, **updates)})
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"[{section}]: {exc}") from exc
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every setting (defaults included) back to the file format."""
    out = io.StringIO()
    for f in dataclasses.fields(cfg):
        sub = getattr(cfg, f.name)
        out.write(f"[{f.name}]\n")
        if f.name == "grid":
            for axis, values in sub.axes:
                out.write(f"{axis} = {', '.join(values)}\n")
            out.write(f"jobs = {sub.jobs}\n\n")
            continue
        reverse = {v: k for k, v in SECTION_ALIASES.get(f.name, {}).items()}
        for sf in dataclasses.fields(sub):
            out.write(f"{reverse.get(sf.name, sf.name)} = {_format_value(getattr(sub, sf.name))}\n")
        out.write("\n")
    return out.getvalue()
