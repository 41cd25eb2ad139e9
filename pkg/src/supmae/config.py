"""Flat ``key = value`` run configuration: parsing, precedence and canonical echo.

One file covers the model, the training recipe and the data source. Keys
form a closed set; anything else is rejected so typos never pass silently.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable

from .model import ConfigError as ModelConfigError
from .model import ModelConfig
from .trainharness import MODES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Where images come from; an empty ``train_path`` selects the toy shapes set."""

    train_path: str = ""
    test_path: str = ""
    data_format: str = "raw-tensor-dir"
    toy_train: int = 2000
    toy_test: int = 500
    toy_seed: int = 0

    def __post_init__(self):
        if self.toy_train < 1 or self.toy_test < 1:
            raise ValueError("toy_train and toy_test must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig

    @property
    def mode(self) -> str:
        return self.train.mode

    def echo(self) -> str:
        return canonical_text(self)

    def fingerprint(self) -> str:
        return fingerprint(self)


_SECTIONS = (("model", ModelConfig), ("train", TrainConfig), ("data", DataConfig))
# mode comes from the subcommand, never from the file
_KEYS = {f.name: (sec, f) for sec, cls in _SECTIONS for f in fields(cls) if f.name != "mode"}
KEYS = tuple(_KEYS)


def _field_type(f: dataclasses.Field) -> str:
    return f.type if isinstance(f.type, str) else f.type.__name__


def _coerce(key: str, raw: str):
    f = _KEYS[key][1]
    kind = _field_type(f)
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError
            return low in ("true", "1")
    except ValueError:
        raise ConfigError(f"config key {key}: expected {kind}, got {raw!r}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines: Iterable[str], origin: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, object] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, object]:
    return parse_lines(items, "<command line>")


def build(mode: str, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults for ``mode`` < file values < command-line overrides."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    merged = {**(file_values or {}), **(overrides or {})}
    parts = {"model": {}, "train": {}, "data": {}}
    for key, value in merged.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parts[_KEYS[key][0]][key] = value
    try:
        model = ModelConfig(**parts["model"])
        train = TrainConfig.for_mode(mode, **parts["train"])
        data = DataConfig(**parts["data"])
    except (ValueError, ModelConfigError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return RunConfig(model, train, data)


def load(mode: str, path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    file_values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror}") from None
        file_values = parse_lines(text.splitlines(), str(p))
    return build(mode, file_values, parse_overrides(overrides))


def canonical_text(cfg: RunConfig) -> str:
    """Every key in a fixed order, one per line; ``parse`` of this is ``cfg``."""
    lines = [f"# mode = {cfg.mode}"]
    for sec, cls in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(cls):
            if f.name != "mode":
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> RunConfig:
    """Inverse of :func:`canonical_text` (the mode rides in the header comment)."""
    first = text.splitlines()[0] if text else ""
    if not first.startswith("# mode = "):
        raise ConfigError("canonical config text lacks its mode header")
    return build(first[len("# mode = "):].strip(), parse_lines(text.splitlines()))


def fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()[:16]


def with_mode(cfg: RunConfig, mode: str, **train_overrides) -> RunConfig:
    """Same model and data, defaults of another mode plus overrides."""
    return replace(cfg, train=TrainConfig.for_mode(mode, seed=cfg.train.seed, **train_overrides))
