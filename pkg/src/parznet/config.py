"""Run configuration files.

An INI-style text file with up to four sections. Every key must name a
field; unknown sections or keys are errors. Example::

    [model]
    conv_channels = 16, 16, 32, 32
    mlp_hidden = 128, 128, 128
    variational = true

    [prior]
    kind = sm            ; lsu | sm
    lambda = 0.25
    eta1 = 0.0005
    eta2 = 1.0

    [trainer]
    batch_size = 32
    max_epochs = 25

    [data]
    class_count = 8
    snr_db = 20
    carriers = 300; 700; 1100       ; one ';'-separated entry per class, ',' between tones

Lists are comma separated; booleans accept true/false/yes/no/1/0.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .model import ModelConfig
from .trainer import TrainConfig
from .variational import PriorKind, ScaleMixturePrior


class ConfigError(ValueError):
    pass


@dataclass
class PriorSettings:
    kind: str = "lsu"
    lam: float = 0.25
    xi: float = 0.0
    eta1: float = 0.0005
    eta2: float = 1.0

    @property
    def prior_kind(self):
        return PriorKind(self.kind)

    @property
    def mixture(self):
        return ScaleMixturePrior(self.lam, self.xi, self.eta1, self.eta2)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prior: PriorSettings = field(default_factory=PriorSettings)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)

    def to_dict(self):
        return {k: dataclasses.asdict(getattr(self, k)) for k in ("model", "prior", "trainer", "data")}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


_ALIASES = {"prior": {"lambda": "lam"}}


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(default, text, key):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            v = float(text)
            if math.isnan(v):
                raise ValueError("nan")
            return v
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if isinstance(default, list):
            return [[float(x) for x in row.split(",") if x.strip()] for row in text.split(";") if row.strip()]
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def _fill(obj, section_name, section):
    names = {f.name for f in dataclasses.fields(obj)}
    aliases = _ALIASES.get(section_name, {})
    for key, text in section.items():
        attr = aliases.get(key, key)
        if attr not in names:
            raise ConfigError(f"unknown key [{section_name}] {key}")
        setattr(obj, attr, _convert(getattr(obj, attr), text, f"[{section_name}] {key}"))
    return obj


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in ("model", "prior", "trainer", "data"):
            raise ConfigError(f"unknown section [{sec}]")
        _fill(getattr(cfg, sec), sec, cp[sec])
    cfg.model.__post_init__()
    try:
        cfg.model.validate()
        cfg.trainer.validate()
        cfg.prior.mixture
        cfg.prior.prior_kind
        cfg.data.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to the file format (round-trips through parse_config)."""
    lines = []
    for sec in ("model", "prior", "trainer", "data"):
        lines.append(f"[{sec}]")
        inv = {v: k for k, v in _ALIASES.get(sec, {}).items()}
        for f in dataclasses.fields(getattr(cfg, sec)):
            v = getattr(getattr(cfg, sec), f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ", ".join(str(x) for x in v)
            elif isinstance(v, list):
                if not v:
                    continue
                s = "; ".join(", ".join(repr(float(x)) for x in row) for row in v)
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{inv.get(f.name, f.name)} = {s}")
        lines.append("")
    return "\n".join(lines)
