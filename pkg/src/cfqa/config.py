"""Pipeline configuration: one JSON file with ``${VAR}`` environment interpolation."""

from __future__ import annotations

import copy
import json
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .corpus import SOURCE_FORMATS
from .errors import ConfigError
from .filters import FilterConfig
from .recitation import RecitationConfig

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate_env(value: Any, environ=os.environ) -> Any:
    """Replace ``${NAME}`` in every string of a JSON structure; unset names are an error."""
    if isinstance(value, str):
        def sub(m):
            if m.group(1) not in environ:
                raise ConfigError(f"environment variable {m.group(1)} referenced in config is not set")
            return environ[m.group(1)]

        return _ENV_REF.sub(sub, value)
    if isinstance(value, list):
        return [interpolate_env(v, environ) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v, environ) for k, v in value.items()}
    return value


@dataclass
class PipelineConfig:
    source: Path
    source_format: str = "triviaqa-mrqa"
    recitation_template: Path | None = None
    factuality_template: Path | None = None
    attribution_template: Path | None = None
    generator_backend: dict = field(default_factory=lambda: {"type": "mock", "strict": False})
    judge_backend: dict = field(default_factory=lambda: {"type": "mock", "strict": False})
    recitation: RecitationConfig = field(default_factory=RecitationConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    scorer: dict | None = None
    cache_dir: Path = Path("cache")
    output_dir: Path = Path("out")
    seed: int = 0
    max_inflight: int = 8
    requests_per_second: float | None = None
    max_retries: int = 2
    backoff_base: float = 0.5
    # Un-interpolated backend/scorer blocks, kept so secrets never reach the manifest.
    raw_sections: dict = field(default_factory=dict, repr=False)
    base_dir: Path = Path(".")

    def validate(self) -> None:
        if self.source_format not in SOURCE_FORMATS:
            raise ConfigError(f"unknown source format {self.source_format!r}")
        for p in (self.source, self.recitation_template, self.factuality_template, self.attribution_template):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"configured path does not exist: {p}")
        for role, spec in (("generator", self.generator_backend), ("judge", self.judge_backend)):
            if spec.get("type") not in ("mock", "http"):
                raise ConfigError(f"{role} backend type must be 'mock' or 'http'")
            if spec.get("type") == "mock" and spec.get("fixture") and not Path(spec["fixture"]).exists():
                raise ConfigError(f"{role} mock fixture does not exist: {spec['fixture']}")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    def snapshot(self) -> dict:
        """The effective configuration for the manifest, minus run-location fields."""

        def rel(p):
            if p is None:
                return None
            p = Path(p)
            try:
                return p.relative_to(self.base_dir).as_posix()
            except ValueError:
                return p.as_posix()

        filters = asdict(self.filters)
        filters["ablate"] = sorted(self.filters.ablate)
        return {
            "source": rel(self.source),
            "source_format": self.source_format,
            "templates": {
                "recitation": rel(self.recitation_template),
                "factuality": rel(self.factuality_template),
                "attribution": rel(self.attribution_template),
            },
            "backends": {
                "generator": self.raw_sections.get("generator", self.generator_backend),
                "judge": self.raw_sections.get("judge", self.judge_backend),
            },
            "recitation": asdict(self.recitation),
            "filters": filters,
            "seed": self.seed,
            "max_retries": self.max_retries,
        }

    def with_overrides(self, **overrides) -> "PipelineConfig":
        cfg = replace(self, **{k: v for k, v in overrides.items() if k in ("seed", "cache_dir", "max_inflight")
                               and v is not None})
        if overrides.get("mode"):
            cfg.filters = replace(cfg.filters, mode=overrides["mode"])
        return cfg


def _path(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _backend_spec(base: Path, spec: dict) -> dict:
    spec = dict(spec)
    if spec.get("fixture"):
        spec["fixture"] = str(_path(base, spec["fixture"]))
    return spec


def config_from_dict(raw: dict, base_dir: str | os.PathLike = ".", environ=os.environ) -> PipelineConfig:
    base = Path(base_dir)
    data = interpolate_env(copy.deepcopy(raw), environ)
    known = {"source", "source_format", "templates", "backends", "recitation", "filters", "scorer",
             "cache_dir", "output_dir", "seed", "max_inflight", "requests_per_second", "max_retries",
             "backoff_base"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "source" not in data:
        raise ConfigError("config needs a 'source' path")
    templates = data.get("templates", {})
    backends = data.get("backends", {})
    generator = backends.get("generator", {"type": "mock", "strict": False})
    judge = backends.get("judge", generator)
    raw_backends = raw.get("backends", {})
    try:
        recitation = RecitationConfig(**data.get("recitation", {}))
        filters = FilterConfig(**data.get("filters", {}))
    except TypeError as e:
        raise ConfigError(f"bad recitation/filters block: {e}") from None
    cfg = PipelineConfig(
        source=_path(base, data["source"]),
        source_format=data.get("source_format", "triviaqa-mrqa"),
        recitation_template=_path(base, templates.get("recitation")),
        factuality_template=_path(base, templates.get("factuality")),
        attribution_template=_path(base, templates.get("attribution")),
        generator_backend=_backend_spec(base, generator),
        judge_backend=_backend_spec(base, judge),
        recitation=recitation,
        filters=filters,
        scorer=data.get("scorer"),
        cache_dir=_path(base, data.get("cache_dir", "cache")),
        output_dir=_path(base, data.get("output_dir", "out")),
        seed=int(data.get("seed", 0)),
        max_inflight=int(data.get("max_inflight", 8)),
        requests_per_second=data.get("requests_per_second"),
        max_retries=int(data.get("max_retries", 2)),
        backoff_base=float(data.get("backoff_base", 0.5)),
        raw_sections={
            "generator": raw_backends.get("generator", generator),
            "judge": raw_backends.get("judge", raw_backends.get("generator", judge)),
        },
        base_dir=base,
    )
    return cfg


def load_config(path: str | os.PathLike, environ=os.environ) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(raw, path.parent, environ)
