"""Run configuration: flat key=value sections, overrides, and the echo.

The file format is INI-style with one section per component. Every key
maps onto a dataclass field; unknown sections or keys are hard errors,
never silently ignored. ``--set section.key=value`` overrides use the
same parser. ``render`` produces a canonical echo whose re-parse equals
the original config exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .augment import SpecAugmentConfig
from .blocks import BlockConfig
from .corpus import CorpusSpec
from .frontend import FrontendConfig
from .heads import HeadConfig
from .model import ModelConfig
from .tensor import ConfigError
from .trainer import OptimConfig


@dataclass
class RunSettings:
    seed: int = 0
    corpus_path: str = "corpus.cham"
    dev_corpus_path: str = ""  # empty: hold out dev_fraction of the corpus
    dev_fraction: float = 0.1
    out_dir: str = "run"

    def validate(self):
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigError("dev_fraction must be in [0, 1)")


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    blocks: BlockConfig = field(default_factory=BlockConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.corpus.feature_dim,
            num_labels=self.corpus.num_labels,
            frontend=self.frontend,
            blocks=self.blocks,
            heads=self.heads,
        )

    def validate(self):
        self.run.validate()
        try:
            self.corpus.validate()
            self.augment.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.optim.validate()
        self.model_config().validate()


_SECTIONS = ("run", "corpus", "frontend", "blocks", "heads", "augment", "optim")


def default_config() -> RunConfig:
    return RunConfig()


def _parse_value(section, key, text, current):
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"[{section}] {key}: expected true/false, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected integer, got {text!r}")
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected number, got {text!r}")
    if isinstance(current, tuple):
        if not text:
            return ()
        try:
            return tuple(int(part) for part in text.split(","))
        except ValueError:
            raise ConfigError(
                f"[{section}] {key}: expected comma-separated integers, got {text!r}"
            )
    return text


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_option(cfg: RunConfig, section, key, text):
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(cfg, section)
    fields = {f.name for f in dataclasses.fields(target)}
    if key not in fields:
        raise ConfigError(f"unknown config key [{section}] {key}")
    setattr(target, key, _parse_value(section, key, text, getattr(target, key)))


def apply_overrides(cfg: RunConfig, overrides):
    """Apply ``section.key=value`` strings in order."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, text = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} needs a section prefix")
        section, key = dotted.split(".", 1)
        set_option(cfg, section.strip(), key.strip(), text)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax error: {e}") from e
    cfg = default_config()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            set_option(cfg, section, key, value)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def render_config(cfg: RunConfig) -> str:
    """Canonical echo of the fully resolved configuration."""
    out = io.StringIO()
    for section in _SECTIONS:
        target = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in dataclasses.fields(target):
            out.write(f"{f.name} = {_format_value(getattr(target, f.name))}\n")
        out.write("\n")
    return out.getvalue()
