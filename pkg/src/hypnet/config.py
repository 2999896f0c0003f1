"""Run configuration as flat ``section.key = value`` text.

Every tunable lives in one of the sections below.  Unknown keys are
rejected, and ``dump`` writes a file that ``load`` reads back to the same
configuration.  Values whose defaults come straight from the published
training and architecture description are tagged ``# published`` in dumps;
the rest are implementation choices.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .extract.pipeline import ExtractionConfig
from .train import AugmentPolicy, ConfigError, TrainConfig


@dataclass
class ModelSettings:
    use_hyper: bool = True


@dataclass
class CorpusSettings:
    split_protocol: str = "sequential"
    dedup: bool = False


@dataclass
class RunSettings:
    seed: int = 0
    precision: str = "f32"
    workers: int = 1

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"run.precision must be f32 or f64, got {self.precision!r}")
        if self.workers < 1:
            raise ConfigError("run.workers must be at least 1")


SECTIONS = {
    "train": TrainConfig,
    "augment": AugmentPolicy,
    "extract": ExtractionConfig,
    "corpus": CorpusSettings,
    "model": ModelSettings,
    "run": RunSettings,
}

PUBLISHED_DEFAULTS = frozenset(
    {
        "train.margin", "train.lr_max", "train.lr_min", "train.warmup_epochs", "train.warmup_start",
        "train.patience", "train.decay", "train.beta1", "train.beta2", "train.cycles",
        "train.first_cycle_strategy", "train.later_strategy",
        "augment.max_rotation_deg",
        "extract.patch_size", "extract.grid", "extract.margin",
        "model.use_hyper",
    }
)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    extract: ExtractionConfig = field(default_factory=ExtractionConfig)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def items(self):
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def updated(self, overrides: dict[str, str]) -> "RunConfig":
        """New config with textual ``section.key`` overrides applied and validated."""
        per_section: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
        for key, text in overrides.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, section)
            names = {f.name for f in dataclasses.fields(current)}
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            per_section[section][name] = _coerce(key, text, getattr(current, name))
        try:
            return RunConfig(
                **{s: dataclasses.replace(getattr(self, s), **per_section[s]) for s in SECTIONS}
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(key: str, text: str, default: object) -> object:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value
    return (base or RunConfig()).updated(overrides)


def load(path: Path, base: RunConfig | None = None) -> RunConfig:
    return parse(Path(path).read_text(encoding="utf-8"), base)


def dump(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.items():
        tag = "  # published" if key in PUBLISHED_DEFAULTS else ""
        lines.append(f"{key} = {_format(value)}{tag}")
    return "\n".join(lines) + "\n"


def write(path: Path, cfg: RunConfig) -> None:
    Path(path).write_text(dump(cfg), encoding="utf-8", newline="")
