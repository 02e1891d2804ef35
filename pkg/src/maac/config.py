"""Experiment configuration: TOML files with ``[env]``, ``[learner]`` and
``[run]`` tables, dotted-path command-line overrides and a stable hash.

The environment owns the episode length and the run owns the seed; the
matching learner fields are filled in from those when the learner
configuration is built.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib
import tomli_w

from maac.envsim import ConfigError, EnvConfig
from maac.learner import TrainConfig, TrainConfigError

SCHEMA_VERSION = 1
SEED_ENV_VAR = "MAAC_SEED"
LEARNER_OWNED_ELSEWHERE = ("seed", "episode_length")


@dataclass(frozen=True)
class RunConfig:
    episodes: int = 1000
    seed: int = 0
    output_dir: str = "runs/maac"
    eval_interval: int = 0  # episodes between evaluation rollouts; 0 disables
    eval_episodes: int = 10
    checkpoint_interval: int = 100  # episodes between periodic checkpoints; 0 disables

    def validate(self) -> "RunConfig":
        if self.episodes < 1:
            raise ConfigError("run.episodes must be positive")
        for name in ("eval_interval", "eval_episodes", "checkpoint_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"run.{name} must be non-negative")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    learner: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.learner, seed=self.run.seed, episode_length=self.env.episode_length)

    def validate(self) -> "ExperimentConfig":
        self.env.validate()
        self.run.validate()
        try:
            self.train_config().validate()
        except TrainConfigError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        learner = {k: v for k, v in asdict(self.learner).items() if k not in LEARNER_OWNED_ELSEWHERE}
        return {"env": asdict(self.env), "learner": learner, "run": asdict(self.run)}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved configuration."""
        return _sha256(self.to_dict())

    def model_hash(self) -> str:
        """Hash of everything that shapes the model and its training stream:
        the environment, the learner and the seed, but not run bookkeeping
        such as episode budget or output paths."""
        d = self.to_dict()
        return _sha256({"env": d["env"], "learner": d["learner"], "seed": self.run.seed})


def _sha256(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


SECTIONS = {"env": EnvConfig, "learner": TrainConfig, "run": RunConfig}
REQUIRED = {("env", "task")}


def _section_fields(section: str) -> dict[str, Any]:
    out = {f.name: f for f in fields(SECTIONS[section])}
    if section == "learner":
        for name in LEARNER_OWNED_ELSEWHERE:
            out.pop(name)
    return out


def _locate(text: str, section: str | None, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.\-]+)\s*\]", stripped)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return lineno
    return None


def _where(source: str, text: str, section: str | None, key: str | None = None) -> str:
    line = _locate(text, section, key) if text else None
    return f"{source}:{line}" if line is not None else source


def _coerce(section: str, key: str, value: Any, where: str) -> Any:
    f = _section_fields(section)[key]
    default = f.default
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{where}: {section}.{key} expects {type(default).__name__}, got {value!r}")
    return value


def _build(tables: Mapping[str, Mapping[str, Any]], source: str, text: str) -> ExperimentConfig:
    for name in tables:
        if name not in SECTIONS:
            raise ConfigError(f"{_where(source, text, name)}: unknown section [{name}]")
    for section, key in sorted(REQUIRED):
        if key not in tables.get(section, {}):
            raise ConfigError(f"{source}: missing required field {section}.{key}")
    parts = {}
    for section, cls in SECTIONS.items():
        table = tables.get(section, {})
        if not isinstance(table, Mapping):
            raise ConfigError(f"{_where(source, text, None, section)}: {section} must be a table")
        known = _section_fields(section)
        kwargs = {}
        for key, value in table.items():
            where = _where(source, text, section, key)
            if key not in known:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            kwargs[key] = _coerce(section, key, value, where)
        parts[section] = cls(**kwargs)
    cfg = ExperimentConfig(**parts)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def parse_override(spec: str) -> tuple[str, str, Any]:
    """``section.key=value``; the value is read as a TOML literal, else a string."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form section.key=value")
    path, raw = spec.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override path {path!r} must be section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return parts[0], parts[1], value


def load_config(
    path: str | None = None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Resolve file, overrides and seeds into a validated configuration.

    Seed precedence: explicit ``seed`` argument, then ``MAAC_SEED``, then the file.
    """
    environ = os.environ if environ is None else environ
    text = ""
    source = "<defaults>"
    tables: dict[str, dict[str, Any]] = {}
    if path is not None:
        source = str(path)
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        text = raw.decode("utf-8", errors="replace")
        try:
            tables = {k: dict(v) if isinstance(v, dict) else v for k, v in tomllib.loads(text).items()}
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
    else:
        tables = {"env": {"task": EnvConfig().task}}
    for spec in overrides:
        section, key, value = parse_override(spec)
        tables.setdefault(section, {})[key] = value
    if environ.get(SEED_ENV_VAR):
        try:
            tables.setdefault("run", {})["seed"] = int(environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {environ[SEED_ENV_VAR]!r}") from exc
    if seed is not None:
        tables.setdefault("run", {})["seed"] = int(seed)
    return _build(tables, source, text)


def config_from_dict(data: Mapping[str, Mapping[str, Any]]) -> ExperimentConfig:
    """Rebuild a configuration stored by :meth:`ExperimentConfig.to_dict`."""
    return _build(data, "<stored config>", "")
