"""Scenario configuration: a versioned TOML schema mapped onto frozen dataclasses.

Unknown keys are rejected and every error names the offending field path
(for example ``ues.motion.step_range``).
"""
from __future__ import annotations

import dataclasses
import math
import sys
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from .geometry import AnchorSet, FovSchedule, Wall

SCHEMA_VERSION = 1
MODES = ("cooperative", "no_download", "single")
STRATEGY_ALIASES = {"management+tracking": "management"}
KNOWN_STRATEGIES = ("management", "tracking", "sweeping", "none")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass(frozen=True)
class SiteConfig:
    pa: tuple[float, float]
    walls: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    eps: float = 4.0
    kappa_los: float = 1.0
    kappa_nlos: float = 1.0


@dataclass(frozen=True)
class MotionConfig:
    model: str  # "random_walk" or "lane"
    # random walk
    step_range: tuple[float, float] = (0.3, 0.5)
    area: tuple[tuple[float, float], tuple[float, float]] = ((-4.9, 4.9), (-4.9, 4.9))
    # lane traffic along +y / -y
    lanes: tuple[float, ...] = ()
    road: tuple[float, float] = (0.0, 1.0)
    speed_kmh: tuple[float, float] = (30.0, 50.0)
    start_jitter: float = 3.0


@dataclass(frozen=True)
class UeConfig:
    count: int
    horizon: float
    motion: MotionConfig
    initial_error: float = 0.15  # mean Euclidean error of the initial estimate
    dt: float = 1.0


@dataclass(frozen=True)
class SensorConfig:
    sigma_angle: float = 0.04
    sigma_imu: float = 0.02
    clutter_rate: float = 0.0


@dataclass(frozen=True)
class CameraConfig:
    position: tuple[float, float]
    height: float
    yaw: float
    pitch: float
    focal: float = 500.0
    width: int = 800
    height_px: int = 600
    p_detect: float = 0.9
    error_min: float = 0.005
    error_max: float = 2.0
    error_power: float = 2.0
    u_cell: int = 40
    v_cell: int = 40
    table: str | None = None  # trained table file; trained on the fly when absent
    train_trajectories: int = 1000
    train_seed: int = 1


@dataclass(frozen=True)
class FovEntry:
    anchor: int
    start: float = -math.inf
    end: float | None = None


@dataclass(frozen=True)
class AlgorithmConfig:
    n_particles: int = 1000
    r_cut: float = 0.3
    r_new_cut: float = 0.3
    d_th: float = 1.0
    t_config: float = 10.0
    d_th_assoc: float = 1.5
    gate_chi2: float = 11.8
    d_merge: float = 4.0
    merge_gate: float = 13.8
    link_gate: float = 13.8
    d_dup: float = 4.0
    download_var_scale: float = 10.0
    r_inc: float = 0.1
    r_decay: float = 0.8
    r_birth: float = 0.4
    r_drop: float = 0.05
    birth_hits: int = 2
    birth_window: int = 3
    exclusive_vision: bool = False


@dataclass(frozen=True)
class BeamSection:
    n_beams: int = 8
    n_bs: int = 16
    n_ue: int = 16
    sigma2: float = 1.0
    theta_th: float | None = None
    strategies: tuple[str, ...] = ("none",)


@dataclass(frozen=True)
class MetricsConfig:
    ospa_cutoff: float = 10.0
    shared_anchors: tuple[int, ...] = ()  # 1-based VA indices for a restricted OSPA
    map_ue: int = 1  # 1-based UE whose local map is scored in single mode


@dataclass(frozen=True)
class RunSection:
    runs: int = 100
    seed: int = 0
    mode: str = "cooperative"


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    site: SiteConfig
    ues: UeConfig
    fov: tuple[tuple[FovEntry, ...], ...]
    schema_version: int = SCHEMA_VERSION
    sensors: SensorConfig = field(default_factory=SensorConfig)
    camera: CameraConfig | None = None
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    beam: BeamSection = field(default_factory=BeamSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunSection = field(default_factory=RunSection)
    base_dir: str | None = None

    @property
    def n_steps(self) -> int:
        return int(round(self.ues.horizon / self.ues.dt))

    def anchors(self) -> AnchorSet:
        return AnchorSet.from_walls(self.site.pa, [Wall(tuple(a), tuple(b), self.site.eps)
                                                   for a, b in self.site.walls])

    def fov_schedules(self) -> list[FovSchedule]:
        out = []
        for entries in self.fov:
            iv: dict[int, list] = {}
            for e in entries:
                iv.setdefault(e.anchor, []).append((e.start, e.end))
            out.append(FovSchedule(iv))
        return out

    def with_overrides(self, **sections) -> "ScenarioConfig":
        """Copy with fields replaced; nested sections accept dicts of field overrides."""
        kw = {}
        for name, val in sections.items():
            cur = getattr(self, name)
            if isinstance(val, dict) and dataclasses.is_dataclass(cur):
                val = dataclasses.replace(cur, **val)
            kw[name] = val
        cfg = dataclasses.replace(self, **kw)
        validate(cfg)
        return cfg


# -- generic conversion ------------------------------------------------------

def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} values, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")  # pragma: no cover


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(_join(path, key), "unknown key")
    kw = {}
    for name, f in fields.items():
        sub = _join(path, name)
        if name in data:
            kw[name] = _convert(hints[name], data[name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(sub, "missing required field")
    return cls(**kw)


def _join(path: str, key) -> str:
    return f"{path}.{key}" if path else str(key)


# -- scenario-level parsing --------------------------------------------------

def _parse_fov(raw, n_ues: int, n_anchors: int) -> tuple[tuple[FovEntry, ...], ...]:
    if not isinstance(raw, dict):
        raise ConfigError("fov", "expected a table")
    raw = dict(raw)
    default = raw.pop("default", None)
    out = []
    for j in range(1, n_ues + 1):
        key = f"ue{j}"
        if key in raw:
            entries = raw.pop(key)
            if not isinstance(entries, list):
                raise ConfigError(f"fov.{key}", "expected a list of anchors or {anchor, start, end} tables")
            conv = []
            for i, e in enumerate(entries):
                p = f"fov.{key}[{i}]"
                if isinstance(e, int) and not isinstance(e, bool):
                    e = {"anchor": e}
                conv.append(_build(FovEntry, e, p))
            out.append(tuple(conv))
        elif default == "all":
            out.append(tuple(FovEntry(a) for a in range(n_anchors)))
        else:
            raise ConfigError(f"fov.{key}", "missing required field")
    if default not in (None, "all"):
        raise ConfigError("fov.default", f"expected \"all\", got {default!r}")
    for key in raw:
        raise ConfigError(f"fov.{key}", "unknown key")
    for j, entries in enumerate(out):
        for i, e in enumerate(entries):
            if not 0 <= e.anchor < n_anchors:
                raise ConfigError(f"fov.ue{j + 1}[{i}].anchor", f"anchor {e.anchor} outside 0..{n_anchors - 1}")
    return tuple(out)


def parse_scenario(data: dict, base_dir: str | None = None) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "expected a table")
    data = dict(data)
    version = data.get("schema_version", None)
    if version is None:
        raise ConfigError("schema_version", "missing required field")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}, expected {SCHEMA_VERSION}")
    fov_raw = data.pop("fov", None)
    if fov_raw is None:
        raise ConfigError("fov", "missing required field")
    data["fov"] = ()
    cfg = _build(ScenarioConfig, data, "")
    n_anchors = 1 + len(cfg.site.walls)
    cfg = dataclasses.replace(cfg, fov=_parse_fov(fov_raw, cfg.ues.count, n_anchors), base_dir=base_dir)
    validate(cfg)
    return cfg


def validate(cfg: ScenarioConfig) -> None:
    u = cfg.ues
    if u.count < 1:
        raise ConfigError("ues.count", "need at least one UE")
    if not u.dt > 0:
        raise ConfigError("ues.dt", "must be positive")
    if not u.horizon > 0:
        raise ConfigError("ues.horizon", "must be positive")
    if u.initial_error < 0:
        raise ConfigError("ues.initial_error", "must be non-negative")
    if not cfg.algorithm.t_config < u.horizon:
        raise ConfigError("algorithm.t_config", "must be smaller than ues.horizon")
    m = u.motion
    if m.model not in ("random_walk", "lane"):
        raise ConfigError("ues.motion.model", f"expected random_walk or lane, got {m.model!r}")
    if m.model == "random_walk" and not 0 < m.step_range[0] <= m.step_range[1]:
        raise ConfigError("ues.motion.step_range", "need 0 < min <= max")
    if m.model == "lane":
        if not m.lanes:
            raise ConfigError("ues.motion.lanes", "lane motion needs at least one lane")
        if not m.road[0] < m.road[1]:
            raise ConfigError("ues.motion.road", "need start < end")
        if not 0 < m.speed_kmh[0] <= m.speed_kmh[1]:
            raise ConfigError("ues.motion.speed_kmh", "need 0 < min <= max")
    if len(cfg.fov) != u.count:
        raise ConfigError("fov", f"expected {u.count} UE entries, got {len(cfg.fov)}")
    s = cfg.sensors
    if s.sigma_angle < 0:
        raise ConfigError("sensors.sigma_angle", "must be non-negative")
    if s.sigma_imu < 0:
        raise ConfigError("sensors.sigma_imu", "must be non-negative")
    if cfg.algorithm.n_particles < 1:
        raise ConfigError("algorithm.n_particles", "must be positive")
    if cfg.run.mode not in MODES:
        raise ConfigError("run.mode", f"expected one of {MODES}, got {cfg.run.mode!r}")
    if cfg.run.runs < 1:
        raise ConfigError("run.runs", "must be at least 1")
    for i, st in enumerate(cfg.beam.strategies):
        if STRATEGY_ALIASES.get(st, st) not in KNOWN_STRATEGIES:
            raise ConfigError(f"beam.strategies[{i}]", f"unknown strategy {st!r}")
    if not 1 <= cfg.metrics.map_ue <= u.count:
        raise ConfigError("metrics.map_ue", f"must be in 1..{u.count}")
    for i, a in enumerate(cfg.metrics.shared_anchors):
        if not 1 <= a <= len(cfg.site.walls):
            raise ConfigError(f"metrics.shared_anchors[{i}]", f"VA index {a} outside 1..{len(cfg.site.walls)}")
    if not cfg.metrics.ospa_cutoff > 0:
        raise ConfigError("metrics.ospa_cutoff", "must be positive")


def canonical_strategy(name: str) -> str:
    name = STRATEGY_ALIASES.get(name, name)
    if name not in KNOWN_STRATEGIES:
        raise ConfigError("strategy", f"unknown strategy {name!r}; expected one of {KNOWN_STRATEGIES}")
    return name


def bundled_scenarios() -> list[str]:
    root = resources.files("isacslam") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_scenario(path_or_name: str) -> ScenarioConfig:
    """Load a scenario from a TOML file, or a bundled scenario by name."""
    p = Path(path_or_name)
    if p.suffix == ".toml" or p.exists():
        if not p.exists():
            raise ConfigError("", f"scenario file not found: {p}")
        text = p.read_text(encoding="utf-8")
        base = str(p.resolve().parent)
    else:
        res = resources.files("isacslam") / "scenarios" / f"{path_or_name}.toml"
        if not res.is_file():
            raise ConfigError("", f"unknown scenario {path_or_name!r}; bundled: {', '.join(bundled_scenarios())}")
        text = res.read_text(encoding="utf-8")
        base = None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"cannot parse {path_or_name}: {exc}") from exc
    return parse_scenario(data, base)
