"""Pipeline configuration: one INI document with a section per stage.

Every key can also be set on the command line as ``--<section>-<key>``
(underscores become dashes), which overrides the file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .embedding import EmbeddingConfig
from .errors import ConfigError
from .matcher import MatcherConfig
from .synth import SynthConfig


@dataclass
class DataSection:
    events: str = ""
    format: str = ""
    truth: str = ""
    max_patient_frac: float = 0.9
    min_patient_count: int = 5
    min_events: int = 40
    strip_identifiers: bool = False


@dataclass
class RepresentSection:
    representation: str = "deep"
    normalize: bool = False


@dataclass
class SimilaritySection:
    measure: str = "cnn"


@dataclass
class SplitSection:
    train: float = 0.45
    test: float = 0.45
    dev: float = 0.10


@dataclass
class ClusterSection:
    k: int = 0
    algorithm: str = "kmeans"
    seed_frac: float = 0.1
    n_init: int = 10
    max_iters: int = 300


@dataclass
class SweepSection:
    param: str = "w"
    d_grid: tuple[int, ...] = (20, 30, 50, 200)
    w_grid: tuple[int, ...] = (5, 10, 15, 20, 25)
    m_grid: tuple[int, ...] = (50, 100, 150, 200)


@dataclass
class PathwaySection:
    cohort: str = "COPD"
    top_k: int = 100


# the matcher's input dimension always follows embedding.dim
_MATCHER_DERIVED = ("dim", "seed")
_DERIVED_SEED = {"synth", "embedding", "matcher"}


@dataclass
class PipelineConfig:
    seed: int = 1
    out: str = "run"
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    represent: RepresentSection = field(default_factory=RepresentSection)
    similarity: SimilaritySection = field(default_factory=SimilaritySection)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    split: SplitSection = field(default_factory=SplitSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    pathways: PathwaySection = field(default_factory=PathwaySection)

    def __post_init__(self):
        self.synchronize()
        self.validate()

    def synchronize(self):
        """Propagate the global seed and the embedding dimension."""
        self.synth = dataclasses.replace(self.synth, seed=self.seed)
        self.embedding = dataclasses.replace(self.embedding, seed=self.seed)
        self.matcher = dataclasses.replace(self.matcher, seed=self.seed, dim=self.embedding.dim)

    def validate(self):
        s = self.split
        if min(s.train, s.test, s.dev) < 0 or abs(s.train + s.test + s.dev - 1.0) > 1e-9:
            raise ConfigError("split.train + split.test + split.dev must equal 1")
        if self.represent.representation not in ("onehot", "shallow", "deep"):
            raise ConfigError(f"represent.representation: unknown value {self.represent.representation!r}")
        if self.similarity.measure not in ("rv", "dcor", "cnn"):
            raise ConfigError(f"similarity.measure: unknown value {self.similarity.measure!r}")
        if self.cluster.algorithm not in ("kmeans", "seeded"):
            raise ConfigError(f"cluster.algorithm: unknown value {self.cluster.algorithm!r}")
        if self.sweep.param not in ("d", "w", "m"):
            raise ConfigError(f"sweep.param: must be one of d, w, m, got {self.sweep.param!r}")
        if self.data.format not in ("", "jsonl", "csv"):
            raise ConfigError(f"data.format: unknown value {self.data.format!r}")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


SECTIONS = ("data", "synth", "embedding", "represent", "similarity", "matcher",
            "split", "cluster", "sweep", "pathways")


def _convert(key: str, raw: str, default: Any):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def section_fields(section: str) -> list[dataclasses.Field]:
    proto = getattr(PipelineConfig(), section)
    return [f for f in fields(proto)
            if not (f.name == "seed" and section in _DERIVED_SEED)
            and not (section == "matcher" and f.name in _MATCHER_DERIVED)]


def build_config(values: dict[str, dict[str, str]], top: dict[str, str] | None = None) -> PipelineConfig:
    """Create a config from raw strings ``{section: {key: value}}``."""
    base = PipelineConfig()
    kwargs: dict[str, Any] = {}
    for key, raw in (top or {}).items():
        if key not in ("seed", "out"):
            raise ConfigError(f"unknown top-level key {key!r}")
        kwargs[key] = _convert(key, raw, getattr(base, key))
    for section, entries in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        proto = getattr(base, section)
        allowed = {f.name for f in section_fields(section)}
        changes = {}
        for key, raw in entries.items():
            if key not in allowed:
                raise ConfigError(f"{section}.{key}: unknown key")
            changes[key] = _convert(f"{section}.{key}", raw, getattr(proto, key))
        try:
            kwargs[section] = dataclasses.replace(proto, **changes)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return PipelineConfig(**kwargs)


def read_config_file(path) -> tuple[dict[str, dict[str, str]], dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    top = dict(parser.defaults()) if parser.defaults() else {}
    if parser.has_section("pipeline"):
        top.update(parser["pipeline"])
    sections = {s: {k: v for k, v in parser[s].items() if k not in parser.defaults()}
                for s in parser.sections() if s != "pipeline"}
    return sections, top


def load_config(path=None, overrides: dict[str, dict[str, str]] | None = None,
                top_overrides: dict[str, str] | None = None) -> PipelineConfig:
    sections: dict[str, dict[str, str]] = {}
    top: dict[str, str] = {}
    if path is not None:
        sections, top = read_config_file(path)
    for section, entries in (overrides or {}).items():
        sections.setdefault(section, {}).update(entries)
    top.update(top_overrides or {})
    return build_config(sections, top)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def dump_config(config: PipelineConfig) -> str:
    """Render ``config`` as an INI document accepted by :func:`load_config`."""
    lines = ["[pipeline]", f"seed = {config.seed}", f"out = {config.out}", ""]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(config, section)
        for f in section_fields(section):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
