"""Flat key-value run configuration with typed validation.

The config file format is one ``section.field = value`` assignment per
line, ``#`` comments, blank lines ignored.  Sections map onto the frozen
dataclasses of the pipeline stages; field names and types come from the
dataclass definitions, so the schema has a single source of truth.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .benchmark import SynthConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


@dataclass(frozen=True)
class CorpusParams:
    """Sizes for corpus construction (both synthetic and file-backed)."""

    num_query_videos: int = 40
    num_reference_videos: int = 30
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        if min(self.num_query_videos, self.num_reference_videos) < 1:
            raise ValueError("corpus sizes must be >= 1")
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


@dataclass(frozen=True)
class PipelineParams:
    """Retrieval and post-processing knobs shared by query and evaluate."""

    top_videos: int = 10
    soft_nms_sigma: float = 0.4
    tiou_tau: float = 0.5
    top_clips_per_video: int = 100
    prune_threshold: float = 1e-4

    def __post_init__(self):
        if self.top_videos < 1 or self.top_clips_per_video < 1:
            raise ValueError("top-k settings must be >= 1")
        if self.soft_nms_sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.soft_nms_sigma}")
        if not 0 < self.tiou_tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tiou_tau}")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = SynthConfig()
    corpus: CorpusParams = CorpusParams()
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()
    pipeline: PipelineParams = PipelineParams()

    def validate(self) -> None:
        if self.stage1.channels != self.synth.channels:
            raise ConfigError(
                f"stage1.channels = {self.stage1.channels} does not match "
                f"synth.channels = {self.synth.channels}")
        if self.stage2.channels != self.synth.channels:
            raise ConfigError(
                f"stage2.channels = {self.stage2.channels} does not match "
                f"synth.channels = {self.synth.channels}")

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            synth=dataclasses.replace(self.synth, seed=seed),
            corpus=self.corpus,
            stage1=dataclasses.replace(self.stage1, seed=seed),
            stage2=dataclasses.replace(self.stage2, seed=seed),
            pipeline=self.pipeline,
        )


_SECTIONS = {
    "synth": SynthConfig,
    "corpus": CorpusParams,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "pipeline": PipelineParams,
}


def _coerce(raw: str, target_type, key: str):
    text = raw.strip()
    if target_type is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    if target_type is str:
        return text
    # remaining case: tuple of ints such as "1,32,1"
    try:
        return tuple(int(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated ints, got {raw!r}") from exc


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        default = getattr(cls, f.name, f.default)
        if isinstance(default, bool):
            out[f.name] = bool
        elif isinstance(default, int):
            out[f.name] = int
        elif isinstance(default, float):
            out[f.name] = float
        elif isinstance(default, str):
            out[f.name] = str
        else:
            out[f.name] = tuple
    return out


def parse_config_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key = value`` pairs; duplicate keys and malformed lines rejected."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def build_run_config(pairs: dict[str, str]) -> RunConfig:
    """Typed RunConfig from flat pairs; unknown keys are errors."""
    by_section: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for key, raw in pairs.items():
        section, _, field = key.partition(".")
        if section not in _SECTIONS or not field:
            raise ConfigError(f"unknown config key {key!r}")
        cls = _SECTIONS[section]
        types = _field_types(cls)
        if field not in types:
            raise ConfigError(f"unknown config key {key!r}")
        by_section[section][field] = _coerce(raw, types[field], key)
    kwargs = {}
    for section, cls in _SECTIONS.items():
        try:
            kwargs[section] = cls(**by_section[section])
        except ValueError as exc:
            raise ConfigError(f"section {section!r}: {exc}") from exc
    config = RunConfig(**kwargs)
    config.validate()
    return config


def load_run_config(path: str | Path | None) -> RunConfig:
    """Config from a file, or all defaults when no path is given."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_run_config(parse_config_pairs(text, str(path)))


def config_to_pairs(config: RunConfig) -> dict[str, str]:
    """Flat textual pairs covering every field (the canonical form)."""
    pairs: dict[str, str] = {}
    for section in _SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            pairs[f"{section}.{f.name}"] = text
    return pairs


def format_config(config: RunConfig) -> str:
    """Canonical serialization: sorted ``key = value`` lines."""
    pairs = config_to_pairs(config)
    return "\n".join(f"{key} = {pairs[key]}" for key in sorted(pairs)) + "\n"


def config_hash(config: RunConfig) -> str:
    """Short digest of the canonical serialization, for log lines."""
    return hashlib.sha256(format_config(config).encode("utf-8")).hexdigest()[:12]
