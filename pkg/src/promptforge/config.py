"""Run configuration: one YAML/JSON document covering trainer, evo, environment and endpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from promptforge.evo import EvoConfig
from promptforge.trainer import TrainerConfig

MODES = ("rl", "rl_no_buffer", "evo")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class EnvironmentConfig:
    kind: str = "keyword"  # keyword | ordered | remote
    seed: int | None = None  # defaults to the run seed
    n_contexts: int = 1
    n_control: int = 8
    n_filler: int = 24
    n_required: int | list[int] = 3
    n_forbidden: int | list[int] = 1
    n_categories: int | list[int] = field(default_factory=lambda: [0, 2])
    sequence_length: int = 4
    split_sizes: list[int] = field(default_factory=lambda: [64, 32, 32])
    exact_match: bool = False


@dataclass
class EndpointSettings:
    base_url: str = ""
    model: str = ""
    temperature: float = 0.0
    max_in_flight: int = 4
    timeout: float = 60.0


@dataclass
class RunConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    evo: EvoConfig = field(default_factory=EvoConfig)
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    endpoint: EndpointSettings | None = None
    critic_endpoint: EndpointSettings | None = None
    critic_template: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["trainer"]["seed"] = seed
        d["evo"]["seed"] = seed
        return from_dict(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _build(cls, data, prefix: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    try:
        return cls(**data)
    except ValueError as exc:
        msg = str(exc)
        named = re.search(r"'(\w+)'", msg)
        raise ConfigError(f"{prefix}.{named.group(1)}" if named else prefix, msg) from None
    except TypeError as exc:
        raise ConfigError(prefix, str(exc)) from None


def from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown key")
    env = _build(EnvironmentConfig, data.get("environment", {}), "environment")
    if env.kind not in ("keyword", "ordered", "remote"):
        raise ConfigError("environment.kind", f"unknown environment {env.kind!r}")
    for sec in ("endpoint", "critic_endpoint"):
        if env.kind == "remote" and sec == "endpoint" and not data.get(sec):
            raise ConfigError(sec, "required for the remote environment")
    return RunConfig(
        trainer=_build(TrainerConfig, data.get("trainer", {}), "trainer"),
        evo=_build(EvoConfig, data.get("evo", {}), "evo"),
        environment=env,
        endpoint=_build(EndpointSettings, data.get("endpoint"), "endpoint"),
        critic_endpoint=_build(EndpointSettings, data.get("critic_endpoint"), "critic_endpoint"),
        critic_template=data.get("critic_template"),
    )


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"{path} is not valid YAML/JSON: {exc}") from None
    return from_dict(data)
