"""Pipeline configuration: one TOML document with a section per stage."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .captioner import TemplateThresholds
from .matcher import MatchWeights
from .remote import EndpointConfig
from .selection import SelectionConfig, SelectionError
from .tracker import NoiseConfig, TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    sequence_dir: str = ""
    output_dir: str = "out"
    query_file: str = ""  # defaults to <sequence_dir>/queries.json
    gt_file: str = ""  # defaults to <sequence_dir>/gt.csv
    caption_cache: str = ""  # defaults to <output_dir>/caption_cache.jsonl
    embedding_cache: str = ""  # defaults to <output_dir>/embedding_cache.jsonl


@dataclass
class CaptionerConfig:
    mode: str = "template"  # template | remote
    throttle: int = 5  # recompute every k frames
    window: int = 5
    move_per_frame: float = 0.2
    turn_per_frame: float = 0.02
    prompt_file: str = ""
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)

    def thresholds(self) -> TemplateThresholds:
        return TemplateThresholds(self.move_per_frame, self.turn_per_frame)


@dataclass
class MatcherConfig:
    encoder: str = "offline"  # offline | remote
    w_embed: float = 1.0
    w_fuzzy: float = 1.0
    normalize_fuzzy: bool = False
    endpoint: EndpointConfig = field(
        default_factory=lambda: EndpointConfig(model="text-embedding-3-small")
    )

    def weights(self) -> MatchWeights:
        return MatchWeights(self.w_embed, self.w_fuzzy, self.normalize_fuzzy)


@dataclass
class EvalConfig:
    enabled: bool = True


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    captioner: CaptionerConfig = field(default_factory=CaptionerConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self, check_paths: bool = True) -> None:
        if self.captioner.mode not in ("template", "remote"):
            raise ConfigError(f"captioner.mode must be 'template' or 'remote', got {self.captioner.mode!r}")
        if self.matcher.encoder not in ("offline", "remote"):
            raise ConfigError(f"matcher.encoder must be 'offline' or 'remote', got {self.matcher.encoder!r}")
        if self.captioner.throttle < 1 or self.captioner.window < 1:
            raise ConfigError("captioner.throttle and captioner.window must be >= 1")
        try:
            self.tracker.validate()
            self.selection.validate()
        except (ValueError, SelectionError) as exc:
            raise ConfigError(str(exc)) from None
        for section, mode, ep in (
            ("captioner", self.captioner.mode, self.captioner.endpoint),
            ("matcher", self.matcher.encoder, self.matcher.endpoint),
        ):
            if mode == "remote" and not ep.api_key():
                raise ConfigError(f"{section} is remote but ${ep.api_key_env} is not set")
        if check_paths:
            seq = Path(self.paths.sequence_dir)
            if not self.paths.sequence_dir or not seq.is_dir():
                raise ConfigError(f"sequence directory {self.paths.sequence_dir!r} does not exist")
            for name, value in (
                ("paths.query_file", self.paths.query_file),
                ("captioner.prompt_file", self.captioner.prompt_file),
            ):
                if value and not Path(value).exists():
                    raise ConfigError(f"{name} {value!r} does not exist")

    # -- resolved paths
    @property
    def out(self) -> Path:
        return Path(self.paths.output_dir)

    def query_path(self) -> Path:
        return Path(self.paths.query_file or Path(self.paths.sequence_dir) / "queries.json")

    def gt_path(self) -> Path:
        return Path(self.paths.gt_file or Path(self.paths.sequence_dir) / "gt.csv")

    def caption_cache_path(self) -> Path:
        return Path(self.paths.caption_cache or self.out / "caption_cache.jsonl")

    def embedding_cache_path(self) -> Path:
        return Path(self.paths.embedding_cache or self.out / "embedding_cache.jsonl")


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
        current = getattr(defaults, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value, f"{where}.{key}")
        elif key == "class_noise":
            kwargs[key] = {k: _build(NoiseConfig, v, f"{where}.class_noise.{k}") for k, v in value.items()}
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(data)


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


def to_toml(config: PipelineConfig) -> str:
    return tomli_w.dumps(_strip_none(dataclasses.asdict(config)))
