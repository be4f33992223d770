"""Experiment configuration: TOML files with ``[section]`` headers.

Parsing is strict: unknown sections or keys are errors that name the key.
Paths are stored as written and resolved against the config file's
directory.  ``to_toml`` writes every value (defaults included), so a parsed
config serializes to a file that parses back to an equal config.
"""
from __future__ import annotations

import hashlib
import sys
from dataclasses import asdict, dataclass, field as _field, fields as dc_fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import ConfigurationError
from .flow_engine import DEFAULT_BOUND, DEFAULT_STEP
from .lie_engine import DEFAULT_H, DEFAULT_SVD_TOL
from .steering import METHODS

COMMANDS = ("stratum", "rank", "steer", "ensemble", "layers", "spin", "demo")
FIELD_KINDS = ("fourier", "attention", "pairwise", "constant", "linear", "averaged")
GROUP_KINDS = ("symmetric", "reflection", "trivial")

# keys each field kind accepts besides ``kind``
_FIELD_KEYS = {
    "fourier": {"seed", "features", "scale", "amplitude"},
    "averaged": {"seed", "features", "scale", "amplitude"},
    "attention": {"seed", "heads", "scale"},
    "pairwise": {"seed", "matrix", "width", "scale"},
    "constant": {"value"},
    "linear": {"matrix"},
}


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    output: str = "out"


@dataclass
class GroupSection:
    kind: str = "symmetric"
    axis: int = 0


@dataclass
class FieldSpec:
    kind: str
    seed: int | None = None
    features: int | None = None
    scale: float | None = None
    amplitude: float | None = None
    heads: int | None = None
    width: float | None = None
    matrix: list | None = None
    value: list | None = None


@dataclass
class CloudSection:
    initial: list[str] = _field(default_factory=list)
    target: list[str] = _field(default_factory=list)


@dataclass
class IntegrationSection:
    step: float = DEFAULT_STEP
    bound: float = DEFAULT_BOUND
    sample_every: int = 0


@dataclass
class SteeringSection:
    min_legs: int | None = None
    max_legs: int = 12
    restarts: int = 4
    budget: int = 20_000
    restart_budget: int | None = None
    tolerance: float = 1e-2
    t_max: float = 10.0
    init_duration: float = 1.0
    labeled: bool = False
    method: str = "least-squares"


@dataclass
class StratumSection:
    tol: float = 0.0
    matrices: list[str] = _field(default_factory=list)


@dataclass
class RankSection:
    depth: int = 3
    h: float = DEFAULT_H
    svd_tol: float = DEFAULT_SVD_TOL
    tol: float = 0.0
    samples: int = 0
    n: int = 0
    d: int = 0
    ensemble: bool = False


@dataclass
class LayersSection:
    dt: float = 0.1
    steps: int = 10


@dataclass
class SpinSection:
    n: int = 2
    hamiltonians: list[str] = _field(default_factory=lambda: ["zz", "collective_x"])
    max_dim: int = 4096
    tol: float = 1e-10


@dataclass
class ExperimentConfig:
    run: RunSection = _field(default_factory=RunSection)
    group: GroupSection = _field(default_factory=GroupSection)
    field: list[FieldSpec] = _field(default_factory=list)
    clouds: CloudSection = _field(default_factory=CloudSection)
    integration: IntegrationSection = _field(default_factory=IntegrationSection)
    steering: SteeringSection = _field(default_factory=SteeringSection)
    stratum: StratumSection = _field(default_factory=StratumSection)
    rank: RankSection = _field(default_factory=RankSection)
    layers: LayersSection = _field(default_factory=LayersSection)
    spin: SpinSection = _field(default_factory=SpinSection)
    base_dir: Path = _field(default=Path("."), compare=False, repr=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.run.output)

    def seeds(self) -> dict[str, Any]:
        return {"run": self.run.seed, "fields": [f.seed for f in self.field if f.seed is not None]}

    def to_dict(self) -> dict:
        out = {}
        for f in dc_fields(self):
            if f.name == "base_dir":
                continue
            value = getattr(self, f.name)
            if isinstance(value, list):
                out[f.name] = [_strip_none(asdict(v)) for v in value]
            else:
                out[f.name] = _strip_none(asdict(value))
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:16]


def _strip_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


_SECTIONS = {
    "run": RunSection,
    "group": GroupSection,
    "clouds": CloudSection,
    "integration": IntegrationSection,
    "steering": SteeringSection,
    "stratum": StratumSection,
    "rank": RankSection,
    "layers": LayersSection,
    "spin": SpinSection,
}


def _coerce(section: str, key: str, value, default):
    """Light type checking against the default's type."""
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false")
        return value
    if isinstance(default, int) or key in ("min_legs", "restart_budget", "seed"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigurationError(f"{where} must be a string or list of strings")
        return list(value)
    return value


def _section(name: str, cls, raw) -> Any:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    defaults = cls()
    known = {f.name for f in dc_fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigurationError(f"unknown key {key!r} in [{name}]")
        kwargs[key] = _coerce(name, key, value, getattr(defaults, key))
    return cls(**kwargs)


def _field_spec(index: int, raw) -> FieldSpec:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"[[field]] entry {index} must be a table")
    kind = raw.get("kind")
    if kind not in FIELD_KINDS:
        raise ConfigurationError(f"[[field]] entry {index}: kind must be one of {', '.join(FIELD_KINDS)}, got {kind!r}")
    allowed = _FIELD_KEYS[kind]
    for key in raw:
        if key != "kind" and key not in allowed:
            raise ConfigurationError(f"unknown key {key!r} in [[field]] entry {index} (kind {kind})")
    spec = FieldSpec(kind=kind)
    for key, value in raw.items():
        if key == "kind":
            continue
        if key in ("seed", "features", "heads"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigurationError(f"[[field]] entry {index}: {key} must be an integer")
        elif key in ("scale", "amplitude", "width"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(f"[[field]] entry {index}: {key} must be a number")
            value = float(value)
        elif key in ("matrix", "value"):
            if not isinstance(value, list):
                raise ConfigurationError(f"[[field]] entry {index}: {key} must be an array")
        setattr(spec, key, value)
    if kind in ("fourier", "averaged", "attention") and spec.seed is None:
        raise ConfigurationError(f"[[field]] entry {index}: kind {kind} needs an explicit seed")
    if kind == "pairwise" and spec.matrix is None and spec.seed is None:
        raise ConfigurationError(f"[[field]] entry {index}: pairwise needs a matrix or an explicit seed")
    if kind == "constant" and spec.value is None:
        raise ConfigurationError(f"[[field]] entry {index}: constant needs a value")
    if kind == "linear" and spec.matrix is None:
        raise ConfigurationError(f"[[field]] entry {index}: linear needs a matrix")
    return spec


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.group.kind not in GROUP_KINDS:
        raise ConfigurationError(f"[group] kind must be one of {', '.join(GROUP_KINDS)}")
    if cfg.run.threads < 1:
        raise ConfigurationError("[run] threads must be >= 1")
    if cfg.integration.step <= 0:
        raise ConfigurationError("[integration] step must be positive")
    if cfg.integration.bound <= 0:
        raise ConfigurationError("[integration] bound must be positive")
    s = cfg.steering
    if s.max_legs < 1 or (s.min_legs is not None and not 1 <= s.min_legs <= s.max_legs):
        raise ConfigurationError("[steering] need 1 <= min_legs <= max_legs")
    if s.budget < 1 or s.restarts < 1 or s.t_max <= 0 or s.init_duration <= 0 or s.tolerance < 0:
        raise ConfigurationError("[steering] budget, restarts, t_max, init_duration must be positive")
    if s.method not in METHODS:
        raise ConfigurationError(f"[steering] method must be one of {', '.join(METHODS)}")
    if cfg.rank.depth < 0 or cfg.rank.h <= 0 or cfg.rank.svd_tol <= 0:
        raise ConfigurationError("[rank] depth >= 0, h > 0 and svd_tol > 0 required")
    if cfg.rank.samples < 0:
        raise ConfigurationError("[rank] samples must be >= 0")
    if cfg.layers.steps < 0:
        raise ConfigurationError("[layers] steps must be >= 0")
    for path in cfg.clouds.initial + cfg.clouds.target + cfg.stratum.matrices:
        if not cfg.resolve(path).is_file():
            raise ConfigurationError(f"missing file {path!r} (looked in {cfg.resolve(path)})")


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    cfg = ExperimentConfig(base_dir=Path(base_dir))
    for key, raw in data.items():
        if key == "field":
            if not isinstance(raw, list):
                raise ConfigurationError("fields are declared with [[field]] tables")
            cfg.field = [_field_spec(i, r) for i, r in enumerate(raw)]
        elif key in _SECTIONS:
            setattr(cfg, key, _section(key, _SECTIONS[key], raw))
        else:
            raise ConfigurationError(f"unknown key {key!r} at top level")
    _validate(cfg)
    return cfg


def parse_config_text(text: str, base_dir: Path = Path("."), source: str = "<string>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder reports "(at line L, column C)"
        raise ConfigurationError(f"{source}: parse error: {exc}") from None
    return config_from_dict(data, base_dir)


def parse_config(path) -> ExperimentConfig:
    """Read, validate and default-fill a config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"missing file {str(path)!r}")
    return parse_config_text(path.read_text(), path.parent, str(path))
