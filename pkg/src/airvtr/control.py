"""Mission state machine, path-following controller, gimbal controller and
safety monitor.

The path follower works in the trunk vehicle frame: the reference is the
projection of the leaf position onto the segment from the trunk to the next
privileged vertex, the reference velocity points along that segment, and
P-D accelerations are mapped to pitch/roll by feedback linearisation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


# --------------------------------------------------------------------------
# Gains and commands
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerGains:
    zeta_z: float = 0.7
    tau_z: float = 1.0
    tau_psi: float = 0.8
    zeta_theta: float = 0.7
    tau_theta: float = 1.2
    v_des: float = 3.0
    g: float = 9.81
    max_tilt: float = math.radians(20.0)

    def __post_init__(self):
        if min(self.tau_z, self.tau_psi, self.tau_theta) <= 0.0:
            raise ValueError("time constants must be positive")
        if min(self.zeta_z, self.zeta_theta) <= 0.0:
            raise ValueError("damping ratios must be positive")
        if self.v_des < 0.0:
            raise ValueError("desired speed must be non-negative")
        if self.g <= 0.0 or self.max_tilt <= 0.0:
            raise ValueError("gravity and tilt limit must be positive")


@dataclass(frozen=True)
class ControlCommand:
    z_rate: float = 0.0
    yaw_rate: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    saturated: bool = False

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.z_rate, self.yaw_rate, self.pitch, self.roll)):
            raise ValueError("command must be finite")


HOVER = ControlCommand()


# --------------------------------------------------------------------------
# Velocity estimate
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VelocityEstimate:
    velocity: np.ndarray
    t_start: float
    t_end: float


def estimate_velocity(times: Sequence[float], positions: np.ndarray, window: int = 5) -> VelocityEstimate:
    """Least-squares constant-velocity fit over the last ``window`` samples.

    Args:
        times: sample times (s).
        positions: (N, 3) positions in a common frame.

    Returns:
        VelocityEstimate whose velocity is the slope of p(t) = p0 + v t.
    """
    t = np.asarray(times, dtype=float)[-window:]
    p = np.asarray(positions, dtype=float).reshape(-1, 3)[-window:]
    if len(t) < 2 or len(t) != len(p):
        raise ValueError("need at least two timestamped positions")
    if t[-1] - t[0] <= 1e-3:
        raise ValueError("timestamps span 1 ms or less")
    tc = t - t.mean()
    v = (tc[:, None] * (p - p.mean(axis=0))).sum(axis=0) / float(tc @ tc)
    return VelocityEstimate(v, float(t[0]), float(t[-1]))


# --------------------------------------------------------------------------
# Path reference
# --------------------------------------------------------------------------


class EndOfPath(Exception):
    """No privileged vertex left in the direction of travel."""


@dataclass(frozen=True, eq=False)
class PathReference:
    p_ref: np.ndarray
    v_ref: np.ndarray
    segment: tuple[int, int]
    p_next: np.ndarray


MIN_SEGMENT = 0.05


def project_onto_segment(p: np.ndarray, p_next: np.ndarray) -> np.ndarray:
    """Orthogonal projection of p onto [0, p_next], clamped to the ends."""
    L2 = float(p_next @ p_next)
    s = float(np.clip((p @ p_next) / L2, 0.0, 1.0))
    return s * p_next


def path_reference(
    p_leaf: np.ndarray, p_next: np.ndarray, v_des: float, segment: tuple[int, int] = (-1, -1)
) -> PathReference:
    """Reference point and velocity on the segment from the trunk (origin) to p_next."""
    p_leaf = np.asarray(p_leaf, dtype=float)
    p_next = np.asarray(p_next, dtype=float)
    L = float(np.linalg.norm(p_next))
    if L < MIN_SEGMENT:
        raise ValueError("zero-length segment")
    return PathReference(project_onto_segment(p_leaf, p_next), v_des * p_next / L, segment, p_next)


def reference_from_chain(chain, graph, gains: ControllerGains, direction: int = -1) -> PathReference:
    """Build the reference for the chain's current trunk.

    ``direction`` is -1 when returning toward the path start. Segments shorter
    than MIN_SEGMENT are skipped by advancing to the following vertex.
    """
    path = graph.privileged_path
    i = graph.path_index(chain.trunk)
    T_trunk_leaf = chain.T_leaf_trunk.inverse()
    j = i + direction
    while 0 <= j < len(path):
        p_next = graph.compose_privileged(chain.trunk, path[j]).translation
        if np.linalg.norm(p_next) >= MIN_SEGMENT:
            return path_reference(T_trunk_leaf.translation, p_next, gains.v_des, (chain.trunk, path[j]))
        j += direction
    raise EndOfPath(f"no privileged vertex beyond {chain.trunk}")


# --------------------------------------------------------------------------
# Path-following law
# --------------------------------------------------------------------------


def tilt_commands(a_x: float, a_y: float, yaw: float, g: float) -> tuple[float, float, bool]:
    """Feedback linearisation of horizontal accelerations to (pitch, roll).

    Arguments of arcsin are clipped to [-1, 1]; the flag reports clipping.
    """
    s1 = a_x / g * math.cos(yaw) + a_y / g * math.sin(yaw)
    s2 = -a_x / g * math.sin(yaw) + a_y / g * math.cos(yaw)
    clipped = abs(s1) > 1.0 or abs(s2) > 1.0
    theta = math.asin(min(1.0, max(-1.0, s1)))
    phi = -math.asin(min(1.0, max(-1.0, s2)))
    return theta, phi, clipped


def compute_command(
    position: np.ndarray,
    velocity: np.ndarray,
    yaw: float,
    ref: PathReference,
    gains: ControllerGains,
) -> ControlCommand:
    """Path-following command from the leaf state in the trunk frame.

    Vertical rate, yaw rate and the x/y accelerations share the P-D form
    (2 zeta / tau) e + (1 / tau^2) e_dot; accelerations become pitch and roll
    through feedback linearisation and are saturated at ``gains.max_tilt``.
    """
    e = np.asarray(ref.p_ref, dtype=float) - np.asarray(position, dtype=float)
    ev = np.asarray(ref.v_ref, dtype=float) - np.asarray(velocity, dtype=float)
    z_rate = 2.0 * gains.zeta_z / gains.tau_z * e[2] + ev[2] / gains.tau_z**2
    yaw_rate = -yaw / gains.tau_psi
    kp = 2.0 * gains.zeta_theta / gains.tau_theta
    kd = 1.0 / gains.tau_theta**2
    a_x = kp * e[0] + kd * ev[0]
    a_y = kp * e[1] + kd * ev[1]
    theta, phi, clipped = tilt_commands(a_x, a_y, yaw, gains.g)
    lim = gains.max_tilt
    sat = clipped or abs(theta) > lim or abs(phi) > lim
    theta = min(lim, max(-lim, theta))
    phi = min(lim, max(-lim, phi))
    return ControlCommand(z_rate + 0.0, yaw_rate + 0.0, theta + 0.0, phi + 0.0, sat)


def hover_reference(p_target: np.ndarray) -> PathReference:
    """Hold position at ``p_target`` (trunk frame) with zero velocity."""
    p = np.asarray(p_target, dtype=float)
    return PathReference(p, np.zeros(3), (-1, -1), p)


# --------------------------------------------------------------------------
# Gimbal controller
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GimbalCommand:
    yaw_setpoint: float
    pitch_setpoint: float
    saturated: bool


def gimbal_command(
    error_angles: tuple[float, float, float],
    yaw_setpoint: float,
    pitch_setpoint: float,
    gain: float = 0.5,
    pitch_limits: tuple[float, float] = (math.radians(-30.0), math.radians(110.0)),
) -> GimbalCommand:
    """Proportional update of the stabilised yaw/pitch setpoints.

    ``error_angles`` is (yaw, pitch, roll) of the leaf camera relative to the
    trunk camera. Roll is left to the gimbal's own levelling.
    """
    e_yaw, e_pitch, _ = error_angles
    yaw = yaw_setpoint - gain * e_yaw
    pitch = pitch_setpoint - gain * e_pitch
    lo, hi = pitch_limits
    sat = not lo <= pitch <= hi
    pitch = min(hi, max(lo, pitch))
    yaw = math.remainder(yaw, 2.0 * math.pi)
    return GimbalCommand(yaw, pitch, sat)


# --------------------------------------------------------------------------
# Mission state machine
# --------------------------------------------------------------------------


class MissionState(enum.Enum):
    IDLE = "Idle"
    LEARN = "Learn"
    RETURN = "Return"
    HOVER = "Hover"
    SAFETY_ABORT = "SafetyAbort"


class MissionEvent(enum.Enum):
    START_LEARN = "StartLearn"
    RETURN_REQUESTED = "ReturnRequested"
    PATH_START_REACHED = "PathStartReached"
    SAFETY_FAULT = "SafetyFault"


class IllegalTransition(ValueError):
    pass


_TRANSITIONS = {
    (MissionState.IDLE, MissionEvent.START_LEARN): MissionState.LEARN,
    (MissionState.LEARN, MissionEvent.RETURN_REQUESTED): MissionState.RETURN,
    (MissionState.RETURN, MissionEvent.PATH_START_REACHED): MissionState.HOVER,
}


def state_machine_step(state: MissionState, event: MissionEvent) -> MissionState:
    if event is MissionEvent.SAFETY_FAULT:
        return MissionState.SAFETY_ABORT
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(f"{event.value} is not allowed in state {state.value}") from None


# --------------------------------------------------------------------------
# Safety monitor
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SafetyTimeouts:
    command: float = 0.2
    localization: float = 5.0
    state: float = 1.0
    failure_limit: int = 5

    def __post_init__(self):
        if min(self.command, self.localization, self.state) <= 0.0 or self.failure_limit < 1:
            raise ValueError("timeouts and failure limit must be positive")


@dataclass(frozen=True)
class SafetyStatus:
    ok: bool
    reason: str = ""


OK = SafetyStatus(True)


def safety_check(
    last_command: float,
    last_localization: float,
    last_state: float,
    now: float,
    timeouts: SafetyTimeouts = SafetyTimeouts(),
    consecutive_failures: int = 0,
) -> SafetyStatus:
    """Stateless watchdog evaluation; see SafetyMonitor for latching."""
    if now - last_command > timeouts.command:
        return SafetyStatus(False, "command-watchdog")
    if now - last_state > timeouts.state:
        return SafetyStatus(False, "state-watchdog")
    if now - last_localization > timeouts.localization:
        return SafetyStatus(False, "localisation-watchdog")
    if consecutive_failures >= timeouts.failure_limit:
        return SafetyStatus(False, "localisation")
    return OK


@dataclass
class SafetyMonitor:
    """Latching wrapper around safety_check; requires a monotonic clock."""

    timeouts: SafetyTimeouts = field(default_factory=SafetyTimeouts)
    status: SafetyStatus = OK
    _last_now: float = -math.inf

    def check(self, last_command, last_localization, last_state, now, consecutive_failures=0) -> SafetyStatus:
        if now < self._last_now:
            raise ValueError("safety clock went backwards")
        self._last_now = now
        if not self.status.ok:
            return self.status
        self.status = safety_check(
            last_command, last_localization, last_state, now, self.timeouts, consecutive_failures
        )
        return self.status

    def reset(self) -> None:
        self.status = OK
