"""Experiment configuration: dataclass defaults plus a flat INI file format.

A config file has sections ``[env]``, ``[encoder]``, ``[sac]`` and ``[run]``;
keys are the dataclass field names.  Tuples are written comma separated.
Overrides use ``section.key=value``.  Every parse or validation error names
the offending field path.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .envs import BestArmConfig
from .errors import ConfigError
from .layers import VARIANTS, EncoderConfig

AGENT_VARIANTS = VARIANTS + ("oracle", "memoryless")
PRECISIONS = {"f32": "float32", "f64": "float64"}


@dataclass
class SACConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    alpha: float = 0.1
    tau: float = 0.005
    batch_size: int = 64
    utd: float = 0.25
    context_len: int = 256
    actor_hidden: tuple[int, ...] = (128,)
    critic_hidden: tuple[int, ...] = (256,)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    learning_starts: int = 1000


@dataclass
class RunConfig:
    variant: str = "vssm-kf"
    total_steps: int = 500_000
    eval_every: int = 10_000
    eval_episodes: int = 100
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = ""
    precision: str = "f32"


@dataclass
class ExperimentConfig:
    env: BestArmConfig = field(default_factory=BestArmConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def dtype(self) -> str:
        return PRECISIONS[self.run.precision]

    @property
    def obs_mode(self) -> str:
        return "oracle" if self.run.variant == "oracle" else "raw"

    @property
    def uses_encoder(self) -> bool:
        return self.run.variant in VARIANTS

    def encoder_config(self) -> EncoderConfig:
        return dataclasses.replace(self.encoder, variant=self.run.variant)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"].pop("variant", None)
        return d

    def sha256(self) -> str:
        """Hash of the resolved config; the output location does not take part."""
        d = self.to_dict()
        d["run"].pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "ExperimentConfig":
        r, s, e = self.run, self.sac, self.encoder
        checks = [
            ("run.variant", r.variant in AGENT_VARIANTS, f"must be one of {AGENT_VARIANTS}"),
            ("run.precision", r.precision in PRECISIONS, f"must be one of {sorted(PRECISIONS)}"),
            ("run.total_steps", r.total_steps >= 1, "must be >= 1"),
            ("run.eval_every", r.eval_every >= 1, "must be >= 1"),
            ("run.eval_episodes", r.eval_episodes >= 1, "must be >= 1"),
            ("run.seeds", len(r.seeds) >= 1, "needs at least one seed"),
            ("sac.lr", s.lr > 0, "must be positive"),
            ("sac.gamma", 0 <= s.gamma <= 1, "must lie in [0, 1]"),
            ("sac.alpha", s.alpha >= 0, "must be non-negative"),
            ("sac.tau", 0 < s.tau <= 1, "must lie in (0, 1]"),
            ("sac.batch_size", s.batch_size >= 1, "must be >= 1"),
            ("sac.utd", s.utd > 0, "must be positive"),
            ("sac.context_len", s.context_len >= 2, "must be >= 2"),
            ("sac.learning_starts", s.learning_starts >= 0, "must be >= 0"),
            ("encoder.latent_size", e.latent_size >= 1, "must be >= 1"),
            ("encoder.embed_size", e.embed_size >= 1, "must be >= 1"),
            ("encoder.num_layers", e.num_layers >= 1, "must be >= 1"),
            ("env.rho", self.env.rho >= 0, "must be non-negative"),
            ("env.max_steps", self.env.max_steps >= 1, "must be >= 1"),
        ]
        for path, ok, msg in checks:
            if not ok:
                raise ConfigError(path, msg)
        return self


_SECTIONS = ("env", "encoder", "sac", "run")
_HIDDEN = {"encoder": {"variant"}}


def _fields(section_obj, section: str) -> dict:
    return {f.name: f for f in dataclasses.fields(section_obj) if f.name not in _HIDDEN.get(section, ())}


def _convert(path: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            kind = type(default[0]) if default else float
            return tuple(kind(t) for t in items)
        return text
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    """Set ``section.key`` entries from strings; returns a new validated config."""
    parts = {name: dataclasses.replace(getattr(cfg, name)) for name in _SECTIONS}
    for path, text in pairs.items():
        section, _, key = path.partition(".")
        if section not in parts or not key:
            raise ConfigError(path, f"unknown section (expected one of {_SECTIONS})")
        fields = _fields(parts[section], section)
        if key not in fields:
            raise ConfigError(path, "unknown field")
        value = _convert(path, getattr(parts[section], key), text)
        try:
            parts[section] = dataclasses.replace(parts[section], **{key: value})
        except ValueError as exc:  # section-level validation (e.g. BestArmConfig)
            raise ConfigError(path, str(exc)) from exc
    return ExperimentConfig(**parts).validate()


def parse_override(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(item, "override must look like section.key=value")
    return key.strip(), value


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(str(path), str(exc)) from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                pairs[f"{section}.{key}"] = value
    pairs.update(overrides or {})
    return apply_overrides(ExperimentConfig(), pairs)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` in the INI format accepted by :func:`load_config`."""
    lines = []
    d = cfg.to_dict()
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for key, value in d[section].items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
