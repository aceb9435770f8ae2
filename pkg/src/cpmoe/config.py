"""Experiment configuration: a sectioned ``key = value`` file with typed defaults.

Sections and keys::

    [model]     every ModelConfig field except ``seed``
    [stream]    m_seen, m_unseen, sigma, n_train, n_test
    [train]     epochs, batch_size, base_lr, beta1, beta2, eps, weight_decay
    [ablation]  cp_bias, te_reg, cka_weighting  (on/off, true/false, 1/0)
    [run]       out, seeds  (comma-separated integers)

The stream dimension and class count come from ``[model] d_in`` and
``n_classes``. Each entry of ``seeds`` seeds the model, the stream and every
random draw of one run.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

from .moe import ModelConfig
from .trainer import Ablation, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key and line."""


@dataclass
class StreamConfig:
    m_seen: int = 8
    m_unseen: int = 4
    sigma: float = 0.15
    n_train: int = 512
    n_test: int = 256

    def validate(self) -> None:
        if self.m_seen < 1 or self.m_unseen < 0:
            raise ValueError("m_seen must be >= 1 and m_unseen >= 0")
        if self.m_unseen > self.m_seen:
            raise ValueError("m_unseen must not exceed m_seen")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


@dataclass
class RunConfig:
    out: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be >= 0")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: Ablation = field(default_factory=Ablation)
    run: RunConfig = field(default_factory=RunConfig)

    def model_for_seed(self, seed: int) -> ModelConfig:
        return dataclasses.replace(self.model, seed=seed)

    def to_dict(self) -> dict:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            out[section] = {k: getattr(obj, k) for k in _keys(section)}
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> ExperimentConfig:
        return _build({s: dict(v) for s, v in obj.items()}, {})


SECTIONS = {
    "model": ModelConfig,
    "stream": StreamConfig,
    "train": TrainConfig,
    "ablation": Ablation,
    "run": RunConfig,
}


def _keys(section: str) -> list[str]:
    names = [f.name for f in dataclasses.fields(SECTIONS[section])]
    return [n for n in names if not (section == "model" and n == "seed")]


def _field_type(section: str, key: str) -> str:
    return {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}[key]


def _parse_value(raw: str, typ: str):
    text = raw.strip()
    if typ == "bool":
        states = configparser.ConfigParser.BOOLEAN_STATES
        if text.lower() not in states:
            raise ValueError(f"expected a boolean (on/off, true/false, yes/no, 1/0), got {text!r}")
        return states[text.lower()]
    if typ == "int":
        return int(text)
    if typ == "float":
        return float(text)
    if typ == "float | None":
        return None if text.lower() in ("", "none") else float(text)
    if typ == "str":
        if not text:
            raise ValueError("expected a non-empty string")
        return text
    if typ == "list[int]":
        return [int(p) for p in text.split(",") if p.strip()]
    raise TypeError(f"unsupported config field type {typ}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to the 1-based line where it is set."""
    where: dict[tuple[str, str], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = no
            continue
        key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip().lower()
        if section is not None:
            where[(section, key)] = no
    return where


def _build(values: dict[str, dict[str, object]], lines: dict[tuple[str, str], int]) -> ExperimentConfig:
    def at(section, key=""):
        no = lines.get((section, key))
        return f" (line {no})" if no else ""

    parts = {}
    for section, cls in SECTIONS.items():
        given = values.get(section, {})
        kwargs = {}
        for key, raw in given.items():
            if key not in _keys(section):
                raise ConfigError(f"unknown key '{key}' in section [{section}]{at(section, key)}")
            try:
                kwargs[key] = _parse_value(raw, _field_type(section, key)) if isinstance(raw, str) else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for [{section}] {key}{at(section, key)}: {exc}") from None
        try:
            obj = cls(**kwargs)
            obj.validate()
        except ValueError as exc:
            # blame the key the message mentions first, else the first key given
            msg = str(exc)
            hits = {k: m.start() for k in kwargs if (m := re.search(rf"\b{k}\b", msg))}
            keys = sorted(hits, key=hits.get) or list(kwargs)
            loc = f"[{section}] {keys[0]}{at(section, keys[0])}" if keys else f"[{section}]"
            raise ConfigError(f"constraint violated at {loc}: {exc}") from None
        parts[section] = obj
    return ExperimentConfig(**parts)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__defaults__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    lines = _line_index(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            no = lines.get((section, ""))
            raise ConfigError(f"unknown section [{section}]" + (f" (line {no})" if no else ""))
        values[section] = dict(parser.items(section))
    return _build(values, lines)


def load_config(path: str | Path, echo_dir: str | Path | None = None) -> ExperimentConfig:
    """Read, validate and fill defaults; optionally write ``config.resolved.ini`` to ``echo_dir``."""
    cfg = parse_config(Path(path).read_text())
    if echo_dir is not None:
        write_resolved(cfg, echo_dir)
    return cfg


def to_ini(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    for i, (section, values) in enumerate(cfg.to_dict().items()):
        if i:
            buf.write("\n")
        buf.write(f"[{section}]\n")
        for key, value in values.items():
            buf.write(f"{key} = {_format_value(value)}\n")
    return buf.getvalue()


def write_resolved(cfg: ExperimentConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.resolved.ini"
    path.write_text(to_ini(cfg))
    return path
