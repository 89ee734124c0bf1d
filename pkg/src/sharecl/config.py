"""Strict JSON run configuration: unknown or duplicated keys are errors."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .adapt import TrainConfig
from .errors import ValidationError
from .model import HyperParams
from .sim import StreamConfig

SEED_ENV = "SHARE_SEED"


@dataclass(frozen=True)
class PathsConfig:
    out: str | None = None
    state: str | None = None
    adapters: str | None = None


@dataclass(frozen=True)
class RunConfig:
    hyper: HyperParams = field(default_factory=HyperParams)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def seed(self):
        return self.stream.seed

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


BLOCKS = {"hyper": HyperParams, "stream": StreamConfig, "train": TrainConfig, "paths": PathsConfig}


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ValidationError(f"duplicate key {key!r}", field=key)
        out[key] = value
    return out


def _check_type(path, value, annotation):
    ann = str(annotation)
    nullable = "None" in ann
    if value is None:
        if nullable:
            return value
        raise ValidationError(f"{path} must not be null", field=path)
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{path} must be an integer, got {value!r}", field=path)
    elif ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{path} must be a number, got {value!r}", field=path)
        value = float(value)
    elif ann.startswith("str"):
        if not isinstance(value, str):
            raise ValidationError(f"{path} must be a string, got {value!r}", field=path)
    return value


def _parse_block(name, cls, doc):
    if not isinstance(doc, dict):
        raise ValidationError(f"block {name!r} must be an object", field=name)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown} in block {name!r}; allowed: {sorted(known)}", field=f"{name}.{unknown[0]}")
    kwargs = {key: _check_type(f"{name}.{key}", value, known[key].type) for key, value in doc.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {name!r} block: {exc}", field=name) from None


def parse_run_config(text, env=None) -> RunConfig:
    """Parse RunConfig JSON. ``SHARE_SEED`` in ``env`` (default ``os.environ``) overrides the seed."""
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(doc) - set(BLOCKS))
    if unknown:
        raise ValidationError(f"unknown top-level key(s) {unknown}; allowed: {sorted(BLOCKS)}", field=unknown[0])
    blocks = {name: _parse_block(name, cls, doc.get(name, {})) for name, cls in BLOCKS.items()}
    cfg = RunConfig(**blocks)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ValidationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}", field=SEED_ENV) from None
        cfg = RunConfig(
            cfg.hyper,
            replace(cfg.stream, seed=seed),
            replace(cfg.train, seed=seed),
            cfg.paths,
        )
    return cfg


def load_run_config(path, env=None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read(), env=env)
