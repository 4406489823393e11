"""Scenario configuration: YAML <-> nested frozen dataclasses.

Unknown keys are rejected so that typos fail loudly. Angles whose field name
ends in ``_deg`` are degrees; everything else is SI.
"""

from __future__ import annotations

import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    extent: tuple[float, float, float, float] = (-20.0, 180.0, -60.0, 140.0)
    density: float = 0.5
    height_sigma: float = 0.15
    # container boxes as (xmin, ymin, zmin, xmax, ymax, zmax)
    boxes: tuple[tuple[float, float, float, float, float, float], ...] = (
        (30.0, 8.0, 0.0, 42.0, 10.5, 2.6),
        (95.0, -12.0, 0.0, 107.0, -9.5, 2.6),
        (150.0, 20.0, 0.0, 152.5, 32.0, 2.6),
        (60.0, 88.0, 0.0, 72.0, 90.5, 5.2),
        (-12.0, 50.0, 0.0, -9.5, 62.0, 2.6),
    )


@dataclass(frozen=True)
class CameraConfig:
    focal: float = 350.0
    cx: float = 336.0
    cy: float = 188.0
    baseline: float = 0.12
    width: int = 672
    height: int = 376
    pixel_sigma: float = 0.3
    max_range: float = 60.0
    min_disparity: float = 0.25
    detection_probability: float = 0.9


@dataclass(frozen=True)
class TeachConfig:
    waypoints: tuple[tuple[float, float], ...] = ((0.0, 0.0), (160.0, 0.0), (160.0, 80.0), (0.0, 80.0), (0.0, 30.0))
    altitude: float = 12.0
    speed: float = 5.0
    accel_limit: float = 2.0
    min_speed: float = 0.5
    yaw_rate_limit_deg: float = 45.0
    # distance along the path at which the return is requested; None = path end
    return_trigger: float | None = None


@dataclass(frozen=True)
class ReturnConfig:
    mode: str = "closed-loop"
    speed: float = 3.0
    altitude_offset: float = 0.0
    lateral_offset: float = 0.0
    hover_radius: float = 1.0
    hover_hold: float = 2.0
    max_duration: float = 900.0


@dataclass(frozen=True)
class VOSettings:
    confusion_rate: float = 0.0
    scale_sigma: float | None = 0.3
    inlier_threshold: float = 2.0
    max_hypotheses: int = 200
    confidence: float = 0.99
    min_inliers: int = 10
    keyframe_min_inliers: int = 120
    keyframe_max_translation: float = 2.0
    keyframe_max_rotation_deg: float = 10.0
    window_size: int = 7
    refine: bool = True
    refine_landmarks: bool = True


@dataclass(frozen=True)
class LocalizationSettings:
    window_radius: int = 5
    trunk_search_radius: int = 10
    failure_limit: int = 5
    min_inliers: int = 20
    max_prior_translation: float = 5.0
    max_prior_rotation_deg: float = 25.0
    latency_frames: int = 0


@dataclass(frozen=True)
class ControllerSettings:
    zeta_z: float = 0.7
    tau_z: float = 1.0
    tau_psi: float = 0.8
    zeta_theta: float = 0.7
    tau_theta: float = 1.2
    max_tilt_deg: float = 20.0
    velocity_window: int = 5


@dataclass(frozen=True)
class GimbalSettings:
    control: bool = True
    gain: float = 0.5
    learn_pitch_deg: float = 60.0
    joint_tau: float = 0.05
    yaw_follow_tau: float = 0.5
    # rate at which joint angles reach the estimator; 0 = every frame
    sample_rate: float = 10.0


@dataclass(frozen=True)
class PlantSettings:
    attitude_tau: float = 0.15
    vz_tau: float = 0.3
    drag: float = 0.2


@dataclass(frozen=True)
class WindSettings:
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gust_sigma: float = 0.0
    gust_tau: float = 2.0


@dataclass(frozen=True)
class SafetySettings:
    command_timeout: float = 0.2
    localization_timeout: float = 5.0
    state_timeout: float = 1.0


@dataclass(frozen=True)
class SimSettings:
    base_rate: float = 150.0
    control_rate: float = 50.0
    frame_rate: float = 15.0


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "out"
    format: str = "csv"
    save_graph: bool = True


@dataclass(frozen=True)
class Scenario:
    name: str = "default"
    seed: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    teach: TeachConfig = field(default_factory=TeachConfig)
    return_: ReturnConfig = field(default_factory=ReturnConfig)
    vo: VOSettings = field(default_factory=VOSettings)
    localization: LocalizationSettings = field(default_factory=LocalizationSettings)
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    gimbal: GimbalSettings = field(default_factory=GimbalSettings)
    plant: PlantSettings = field(default_factory=PlantSettings)
    wind: WindSettings = field(default_factory=WindSettings)
    safety: SafetySettings = field(default_factory=SafetySettings)
    sim: SimSettings = field(default_factory=SimSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def __post_init__(self):
        validate(self)

    def teach_key(self) -> tuple:
        """Everything the learn phase depends on; equal keys give equal teach runs."""
        return (self.seed, self.world, self.camera, self.teach, self.vo, self.gimbal, self.plant, self.wind, self.sim)


RETURN_MODES = ("closed-loop", "scripted-offset")
FORMATS = ("csv", "jsonl")


def validate(s: Scenario) -> None:
    t = s.teach
    if len(t.waypoints) < 2:
        raise ConfigError("teach path needs at least 2 waypoints")
    if t.speed <= 0 or s.return_.speed <= 0:
        raise ConfigError("speeds must be positive")
    if t.accel_limit <= 0 or t.min_speed <= 0:
        raise ConfigError("teach acceleration limit and minimum speed must be positive")
    if s.return_.mode not in RETURN_MODES:
        raise ConfigError(f"return mode must be one of {RETURN_MODES}, got {s.return_.mode!r}")
    if s.output.format not in FORMATS:
        raise ConfigError(f"output format must be one of {FORMATS}")
    if not 0.0 <= s.vo.confusion_rate < 1.0:
        raise ConfigError("confusion rate must lie in [0, 1)")
    if s.wind.gust_sigma < 0:
        raise ConfigError("wind sigma must be non-negative")
    if not 2 <= s.vo.window_size <= 10:
        raise ConfigError("VO window size must lie in [2, 10]")
    sim = s.sim
    for name, rate in (("control_rate", sim.control_rate), ("frame_rate", sim.frame_rate)):
        ratio = sim.base_rate / rate
        if rate <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(f"{name} must divide base_rate")
    if s.gimbal.sample_rate < 0:
        raise ConfigError("gimbal sample rate must be non-negative")


# --------------------------------------------------------------------------
# (de)serialisation
# --------------------------------------------------------------------------

_ALIASES = {"return_": "return"}
_UNALIAS = {v: k for k, v in _ALIASES.items()}


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _build(cls, data, where=""):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'scenario'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _UNALIAS.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        kwargs[name] = _coerce(hints[name], value, f"{where + '.' if where else ''}{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def scenario_from_dict(data: dict) -> Scenario:
    return _build(Scenario, data)


def _plain(obj):
    if isinstance(obj, dict):
        return {_ALIASES.get(k, k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def scenario_to_dict(s: Scenario) -> dict:
    return _plain(asdict(s))


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return scenario_from_dict(data or {})


class _Dumper(yaml.SafeDumper):
    pass


def _represent_list(dumper, data):
    flat = all(not isinstance(v, (list, dict)) for v in data)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flat)


_Dumper.add_representer(list, _represent_list)


def dump_scenario(s: Scenario) -> str:
    return yaml.dump(scenario_to_dict(s), Dumper=_Dumper, sort_keys=False)


SWEEP_PARAMETERS = {
    "return_speed": ("return_", "speed"),
    "return_altitude_offset": ("return_", "altitude_offset"),
    "confusion_rate": ("vo", "confusion_rate"),
    "wind_sigma": ("wind", "gust_sigma"),
    "speed": None,  # learn and return speed together
}


def with_parameter(s: Scenario, name: str, value: float) -> Scenario:
    """Copy of ``s`` with one sweepable parameter replaced."""
    if name not in SWEEP_PARAMETERS:
        raise ConfigError(f"unknown sweep parameter {name!r}; choose from {sorted(SWEEP_PARAMETERS)}")
    if name == "speed":
        return replace(s, teach=replace(s.teach, speed=float(value)), return_=replace(s.return_, speed=float(value)))
    section, key = SWEEP_PARAMETERS[name]
    return replace(s, **{section: replace(getattr(s, section), **{key: float(value)})})

