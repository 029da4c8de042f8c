"""Run configuration: one JSON document mirroring every module's settings.

Unknown keys are rejected so typos fail loudly; every command logs the
fully resolved configuration it actually ran with.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .fusion import FusionConfig
from .inference import TrainConfig
from .network import NetworkConfig
from .scenes import SceneSpec

__all__ = ["ConfigError", "InferenceSettings", "EvalSettings", "RunConfig",
           "load_run_config", "resolved_dict"]


class ConfigError(ValueError):
    """Bad configuration file or overrides."""


@dataclass
class InferenceSettings:
    depth_planes: int = 512


@dataclass
class EvalSettings:
    cap: float | None = None  # None: 20x plane spacing at the median GT depth
    cap_spacing_factor: float = 20.0


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    threads: int = 1


_TUPLE_FIELDS = {"holdout_refs", "betas"}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        if name in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus override sections.

    ``overrides`` maps section name to a dict of field overrides (applied
    after the file).
    """
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    sections = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"config: unknown sections {unknown}")
    merged: dict = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for sec, over in (overrides or {}).items():
        if sec == "threads":
            merged["threads"] = over
            continue
        if sec not in sections:
            raise ConfigError(f"override for unknown section {sec!r}")
        merged.setdefault(sec, {})
        merged[sec].update({k: v for k, v in over.items() if v is not None})
    kwargs = {}
    for name, f in sections.items():
        if name == "threads":
            kwargs["threads"] = int(merged.get("threads", 1))
            continue
        section_cls = f.default_factory
        kwargs[name] = _build(section_cls, merged.get(name, {}), name)
    return RunConfig(**kwargs)


def resolved_dict(cfg: RunConfig) -> dict:
    """JSON-ready dump of the fully resolved configuration."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = asdict(v) if is_dataclass(v) else v
    return out
