"""Sectioned TOML run configuration with strict keys, canonical form and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .alignment import AlignmentBranch
from .analysis import AnalysisConfig
from .backbone import ModelConfig
from .data import DataConfig
from .errors import ConfigError, PixAlignError
from .sampler import SamplerConfig
from .trainer import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "alignment": AlignmentBranch,
    "sampler": SamplerConfig,
    "data": DataConfig,
    "analysis": AnalysisConfig,
}
# TOML spelling -> dataclass field, for names Python reserves
KEY_ALIASES = {("alignment", "lambda"): "lam"}
FIELD_ALIASES = {(s, f): k for (s, k), f in KEY_ALIASES.items()}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def _where(text: str, section: str, key: str | None = None) -> str:
    n = _line_of(text, section, key) if text else None
    return f"line {n}: " if n else ""


def _coerce(default, value, section: str, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be a boolean")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"[{section}] {key} must be a list")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"[{section}] {key} must be a string")
    if isinstance(default, int) and not isinstance(default, bool) and not isinstance(value, int):
        raise ConfigError(f"[{section}] {key} must be an integer")
    return value


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _section_dict(obj) -> dict:
    d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    alignment: AlignmentBranch = field(default_factory=AlignmentBranch)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.data.kind != "dir":
            if self.data.num_classes != self.model.num_classes:
                raise ConfigError("data.num_classes must equal model.num_classes")
            if self.data.image_size != self.model.image_size:
                raise ConfigError("data.image_size must equal model.image_size")

    # -- construction

    @classmethod
    def from_dict(cls, raw: dict, text: str = "") -> "RunConfig":
        unknown = [s for s in raw if s not in SECTIONS]
        if unknown:
            raise ConfigError(f"{_where(text, unknown[0])}unknown section [{unknown[0]}]")
        built = {}
        for name, sect_cls in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"{_where(text, name)}[{name}] must be a table")
            defaults = _defaults(sect_cls)
            kwargs = {}
            for key, value in values.items():
                fname = KEY_ALIASES.get((name, key), key)
                if fname not in defaults or (name, fname) in FIELD_ALIASES and key == fname:
                    raise ConfigError(f"{_where(text, name, key)}unknown key {key!r} in [{name}]")
                try:
                    kwargs[fname] = _coerce(defaults[fname], value, name, key)
                except ConfigError as exc:
                    raise ConfigError(f"{_where(text, name, key)}{exc}") from None
            try:
                built[name] = sect_cls(**kwargs)
            except (PixAlignError, TypeError, ValueError) as exc:
                raise ConfigError(f"{_where(text, name)}[{name}] {exc}") from None
        return cls(**built)

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None) -> "RunConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        for item in overrides or []:
            apply_override(raw, item)
        return cls.from_dict(raw, text)

    @classmethod
    def from_file(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        return cls.from_text(text, overrides)

    # -- canonical form

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = _section_dict(getattr(self, name))
            out[name] = {FIELD_ALIASES.get((name, k), k): v for k, v in d.items()}
        return out

    def canonical_text(self) -> str:
        lines = []
        for name in sorted(SECTIONS):
            lines.append(f"[{name}]")
            sect = self.to_dict()[name]
            for key in sorted(sect):
                lines.append(f"{key} = {_toml_value(sect[key])}")
            lines.append("")
        return "\n".join(lines)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        r = repr(v)
        return r if any(c in r for c in ".eEn") else r + ".0"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialise {v!r}")


def parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(raw: dict, item: str) -> None:
    """Apply ``section.key=value`` to a raw config mapping."""
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    path, value = item.split("=", 1)
    section, key = path.strip().split(".", 1)
    raw.setdefault(section, {})[key.strip()] = parse_value(value.strip())
