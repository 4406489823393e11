"""Synthetic world: landmark field, stereo camera, gimbal, multirotor plant, wind.

Frames: world is z-up; the vehicle body is x-forward, y-left, z-up; the
camera optical frame is x-right, y-down, z-forward.  The gimbal's "camera
body" frame shares the vehicle convention (x along the optical axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .se3 import RigidTransform, euler_to_matrix, rot_x, rot_y, rot_z, wrap_angle

GRAVITY = 9.81

# optical <- camera body
BODY_TO_OPTICAL = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


class FarPointError(ValueError):
    """Disparity below the triangulation threshold."""


class GimbalLimitError(ValueError):
    """Joint angle outside the configured range."""


# --------------------------------------------------------------------------
# Landmarks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box occluder (e.g. a shipping container)."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains_xy(self, xy: np.ndarray) -> np.ndarray:
        return (
            (xy[:, 0] >= self.lo[0])
            & (xy[:, 0] <= self.hi[0])
            & (xy[:, 1] >= self.lo[1])
            & (xy[:, 1] <= self.hi[1])
        )


@dataclass(frozen=True, eq=False)
class LandmarkWorld:
    ids: np.ndarray
    positions: np.ndarray
    extent: tuple[float, float, float, float, float, float]
    seed: int
    boxes: tuple[Box, ...] = ()

    def __len__(self) -> int:
        return len(self.ids)


def generate_world(
    seed: int,
    extent: Sequence[float],
    density: float,
    height_sigma: float = 0.0,
    boxes: Sequence[Box] = (),
) -> LandmarkWorld:
    """Scatter landmarks uniformly over a ground rectangle.

    Args:
        seed: RNG seed; equal seeds give bit-identical worlds.
        extent: (xmin, xmax, ymin, ymax) in metres.
        density: expected landmarks per square metre (Poisson count).
        height_sigma: std-dev of ground height jitter, clipped at 3 sigma.
        boxes: landmarks whose xy falls inside a box are lifted onto its top.
    """
    xmin, xmax, ymin, ymax = (float(v) for v in extent)
    area = (xmax - xmin) * (ymax - ymin)
    if not (xmax > xmin and ymax > ymin) or area <= 0.0:
        raise ValueError(f"degenerate world extent {tuple(extent)}")
    if density <= 0.0:
        raise ValueError("landmark density must be positive")
    rng = np.random.default_rng([int(seed), 0x5EED])
    n = int(rng.poisson(area * density))
    xy = np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])
    z = np.clip(rng.standard_normal(n) * height_sigma, -3 * height_sigma, 3 * height_sigma)
    boxes = tuple(boxes)
    for box in boxes:
        z[box.contains_xy(xy)] = box.hi[2]
    zmin = min([-3 * height_sigma] + [b.lo[2] for b in boxes])
    zmax = max([3 * height_sigma] + [b.hi[2] for b in boxes])
    positions = np.column_stack([xy, z])
    return LandmarkWorld(
        ids=np.arange(n, dtype=np.int64),
        positions=positions,
        extent=(xmin, xmax, ymin, ymax, zmin, zmax),
        seed=int(seed),
        boxes=boxes,
    )


# --------------------------------------------------------------------------
# Stereo camera
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StereoCameraModel:
    """Rectified pinhole stereo pair; defaults mirror a ZED at 672x376."""

    focal: float = 350.0
    cx: float = 336.0
    cy: float = 188.0
    baseline: float = 0.12
    width: int = 672
    height: int = 376
    pixel_sigma: float = 0.3
    max_range: float = 60.0
    min_disparity: float = 0.25
    detection_probability: float = 1.0

    def __post_init__(self):
        if self.baseline <= 0.0:
            raise ValueError("baseline must be positive")
        if self.pixel_sigma < 0.0:
            raise ValueError("pixel noise sigma must be non-negative")
        if self.focal <= 0.0:
            raise ValueError("focal length must be positive")

    @property
    def horizontal_fov(self) -> float:
        return 2.0 * math.atan(0.5 * self.width / self.focal)

    @property
    def vertical_fov(self) -> float:
        return 2.0 * math.atan(0.5 * self.height / self.focal)

    @property
    def fb(self) -> float:
        return self.focal * self.baseline

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (N, 3) -> (N, 3) of (u, v, disparity)."""
        p = np.atleast_2d(points)
        inv_z = 1.0 / p[:, 2]
        return np.column_stack(
            [
                self.focal * p[:, 0] * inv_z + self.cx,
                self.focal * p[:, 1] * inv_z + self.cy,
                self.fb * inv_z,
            ]
        )

    def in_image(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (u >= 0.0) & (u < self.width) & (v >= 0.0) & (v < self.height)


@dataclass(frozen=True, eq=False)
class ObservationFrame:
    """One stereo capture.

    ``ids`` are descriptor identities (the true landmark ids), ``uv`` the
    left-image pixel coordinates, ``disparity`` in pixels. ``camera_pose`` is
    the simulator's ground truth (T_world_camera) and is only used for
    scoring, never by the estimator.
    """

    timestamp: float
    ids: np.ndarray
    uv: np.ndarray
    disparity: np.ndarray
    camera_pose: RigidTransform

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def observations(self) -> np.ndarray:
        return np.column_stack([self.uv, self.disparity])


def _occluded(origin: np.ndarray, points: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
    hidden = np.zeros(len(points), dtype=bool)
    if not boxes or len(points) == 0:
        return hidden
    d = points - origin
    s_max = 1.0 - 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        for box in boxes:
            lo = np.asarray(box.lo, dtype=float)
            hi = np.asarray(box.hi, dtype=float)
            t1 = (lo - origin) / d
            t2 = (hi - origin) / d
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tfar >= np.maximum(tnear, 0.0)) & (tnear <= s_max) & (tfar > 0.0)
            hidden |= hit
    return hidden


def visible_landmarks(world: LandmarkWorld, camera: StereoCameraModel, T_wc: RigidTransform):
    """Indices and noise-free (u, v, d) of landmarks the camera can see."""
    R, t = T_wc.rotation, T_wc.translation
    rel = world.positions - t
    # cheap range gate before the full transform
    near = np.einsum("ij,ij->i", rel, rel) <= camera.max_range**2
    idx = np.flatnonzero(near)
    pc = rel[idx] @ R
    front = pc[:, 2] > 0.1
    idx, pc = idx[front], pc[front]
    uvd = camera.project(pc) if len(pc) else np.zeros((0, 3))
    ok = camera.in_image(uvd[:, 0], uvd[:, 1]) & camera.in_image(uvd[:, 0] - uvd[:, 2], uvd[:, 1])
    idx, uvd = idx[ok], uvd[ok]
    if world.boxes and len(idx):
        keep = ~_occluded(t, world.positions[idx], world.boxes)
        idx, uvd = idx[keep], uvd[keep]
    return idx, uvd


def observe(
    world: LandmarkWorld,
    camera: StereoCameraModel,
    T_wc: RigidTransform,
    seed,
    timestamp: float = 0.0,
) -> ObservationFrame:
    """Simulate a stereo capture from camera pose T_wc (camera -> world).

    Independent Gaussian noise is added to the left u, v and the right u.
    Records whose noisy disparity is non-positive or that fall off either
    image are dropped.
    """
    rng = np.random.default_rng(seed)
    idx, uvd = visible_landmarks(world, camera, T_wc)
    if camera.detection_probability < 1.0 and len(idx):
        keep = rng.random(len(idx)) < camera.detection_probability
        idx, uvd = idx[keep], uvd[keep]
    u, v, d = uvd[:, 0], uvd[:, 1], uvd[:, 2]
    if camera.pixel_sigma > 0.0 and len(idx):
        noise = rng.standard_normal((len(idx), 3)) * camera.pixel_sigma
        ur = u - d + noise[:, 2]
        u = u + noise[:, 0]
        v = v + noise[:, 1]
        d = u - ur
        ok = (d > 0.0) & camera.in_image(u, v) & camera.in_image(ur, v)
        idx, u, v, d = idx[ok], u[ok], v[ok], d[ok]
    return ObservationFrame(
        timestamp=float(timestamp),
        ids=world.ids[idx].copy(),
        uv=np.column_stack([u, v]),
        disparity=np.asarray(d, dtype=float).copy(),
        camera_pose=T_wc,
    )


def triangulate(uv: np.ndarray, disparity: np.ndarray, camera: StereoCameraModel) -> np.ndarray:
    """Back-project stereo records into camera-frame points.

    Raises FarPointError if any disparity is below ``camera.min_disparity``;
    callers holding mixed records should filter with ``triangulable`` first.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    d = np.atleast_1d(np.asarray(disparity, dtype=float))
    if np.any(~triangulable(d, camera)):
        raise FarPointError(
            f"disparity {float(d.min()):.3f} px below threshold {camera.min_disparity} px"
        )
    z = camera.fb / d
    x = (uv[:, 0] - camera.cx) * z / camera.focal
    y = (uv[:, 1] - camera.cy) * z / camera.focal
    return np.column_stack([x, y, z])


def triangulable(disparity: np.ndarray, camera: StereoCameraModel) -> np.ndarray:
    return np.asarray(disparity) >= camera.min_disparity


# --------------------------------------------------------------------------
# Gimbal
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GimbalLinks:
    """Yaw -> roll -> pitch chain with fixed link offsets (metres).

    The offsets are nominal values for a Ronin-MX class gimbal hanging below
    the airframe.
    """

    mount: tuple[float, float, float] = (0.0, 0.0, -0.20)
    yaw_to_roll: tuple[float, float, float] = (0.0, 0.0, -0.10)
    roll_to_pitch: tuple[float, float, float] = (0.02, 0.0, 0.0)
    pitch_to_camera: tuple[float, float, float] = (0.06, 0.0, -0.03)
    yaw_limits: tuple[float, float] = (-math.pi, math.pi)
    roll_limits: tuple[float, float] = (-0.6, 0.6)
    pitch_limits: tuple[float, float] = (-0.5, 2.0)


@dataclass(frozen=True)
class GimbalState:
    roll: float
    pitch: float
    yaw: float
    links: GimbalLinks = field(default_factory=GimbalLinks)

    @property
    def T_sv(self) -> RigidTransform:
        return gimbal_fk((self.roll, self.pitch, self.yaw), self.links)


def check_joint_limits(angles: Sequence[float], links: GimbalLinks) -> None:
    roll, pitch, yaw = angles
    for name, a, (lo, hi) in (
        ("roll", roll, links.roll_limits),
        ("pitch", pitch, links.pitch_limits),
        ("yaw", yaw, links.yaw_limits),
    ):
        if not lo - 1e-12 <= a <= hi + 1e-12:
            raise GimbalLimitError(f"{name} joint {a:.4f} rad outside [{lo:.4f}, {hi:.4f}]")


def camera_pose_in_vehicle(angles: Sequence[float], links: GimbalLinks) -> np.ndarray:
    """4x4 T_vehicle_camera(optical) for joint angles (roll, pitch, yaw)."""
    roll, pitch, yaw = angles

    def tr(v):
        T = np.eye(4)
        T[:3, 3] = v
        return T

    def rt(R):
        T = np.eye(4)
        T[:3, :3] = R
        return T

    return (
        tr(links.mount)
        @ rt(rot_z(yaw))
        @ tr(links.yaw_to_roll)
        @ rt(rot_x(roll))
        @ tr(links.roll_to_pitch)
        @ rt(rot_y(pitch))
        @ tr(links.pitch_to_camera)
        @ rt(BODY_TO_OPTICAL.T)
    )


def gimbal_fk(angles: Sequence[float], links: GimbalLinks = GimbalLinks()) -> RigidTransform:
    """Vehicle-to-sensor transform T_sv for joint angles (roll, pitch, yaw)."""
    check_joint_limits(angles, links)
    T_vs = camera_pose_in_vehicle(angles, links)
    return RigidTransform.from_matrix(T_vs).inverse()


def gimbal_ik(R_wv: np.ndarray, yaw_w: float, pitch_w: float) -> tuple[float, float, float]:
    """Joint angles (roll, pitch, yaw) putting the camera body at world yaw/pitch, zero roll."""
    M = R_wv.T @ (rot_z(yaw_w) @ rot_y(pitch_w))
    # M = Rz(yaw) Rx(roll) Ry(pitch)
    roll = math.asin(max(-1.0, min(1.0, M[2, 1])))
    pitch = math.atan2(-M[2, 0], M[2, 2])
    yaw = math.atan2(-M[0, 1], M[1, 1])
    return roll, pitch, yaw


@dataclass
class GimbalSim:
    """Stabilised 3-axis gimbal.

    The internal controller holds the camera at a world-referenced
    (yaw, pitch) setpoint with zero roll; joints slew with a first-order lag.
    """

    links: GimbalLinks = field(default_factory=GimbalLinks)
    tau: float = 0.05
    yaw_setpoint: float = 0.0
    pitch_setpoint: float = math.radians(60.0)
    roll: float = 0.0
    pitch: float = math.radians(60.0)
    yaw: float = 0.0
    saturated: bool = False

    @property
    def state(self) -> GimbalState:
        return GimbalState(self.roll, self.pitch, self.yaw, self.links)

    def reset_to(self, R_wv: np.ndarray) -> None:
        self.roll, self.pitch, self.yaw = self._clamped(gimbal_ik(R_wv, self.yaw_setpoint, self.pitch_setpoint))

    def _clamped(self, angles):
        roll, pitch, yaw = angles
        L = self.links
        c = (
            min(max(roll, L.roll_limits[0]), L.roll_limits[1]),
            min(max(pitch, L.pitch_limits[0]), L.pitch_limits[1]),
            min(max(yaw, L.yaw_limits[0]), L.yaw_limits[1]),
        )
        self.saturated = c != (roll, pitch, yaw)
        return c

    def step(self, R_wv: np.ndarray, dt: float) -> None:
        roll_d, pitch_d, yaw_d = gimbal_ik(R_wv, self.yaw_setpoint, self.pitch_setpoint)
        a = 1.0 - math.exp(-dt / self.tau)
        roll = self.roll + a * (roll_d - self.roll)
        pitch = self.pitch + a * (pitch_d - self.pitch)
        yaw = wrap_angle(self.yaw + a * wrap_angle(yaw_d - self.yaw))
        self.roll, self.pitch, self.yaw = self._clamped((roll, pitch, yaw))

    def follow_vehicle_yaw(self, vehicle_yaw: float, dt: float, tau: float = 0.5) -> None:
        """Open-loop mode: smooth the yaw setpoint toward the vehicle heading."""
        a = 1.0 - math.exp(-dt / tau)
        self.yaw_setpoint = wrap_angle(self.yaw_setpoint + a * wrap_angle(vehicle_yaw - self.yaw_setpoint))


# --------------------------------------------------------------------------
# Vehicle plant and wind
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VehicleState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    timestamp: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.yaw, self.pitch, self.roll)

    @property
    def pose(self) -> RigidTransform:
        """T_world_vehicle (ground truth)."""
        return RigidTransform(self.rotation, self.position)


@dataclass(frozen=True)
class PlantParams:
    attitude_tau: float = 0.15
    vz_tau: float = 0.3
    drag: float = 0.2
    g: float = GRAVITY


def tilt_to_acceleration(pitch: float, roll: float, yaw: float, g: float = GRAVITY) -> np.ndarray:
    """Horizontal world acceleration produced by a tilt; inverse of the
    feedback-linearisation map used by the path follower."""
    bx = g * math.sin(pitch)
    by = -g * math.sin(roll)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * bx - s * by, s * bx + c * by])


def step_dynamics(
    state: VehicleState,
    cmd,
    wind: np.ndarray | None,
    dt: float,
    params: PlantParams = PlantParams(),
) -> VehicleState:
    """Advance the kinematic-with-lag multirotor model by dt seconds.

    ``cmd`` needs attributes z_rate, yaw_rate, pitch, roll.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt {dt} outside (0, 0.1]")
    a_att = 1.0 - math.exp(-dt / params.attitude_tau)
    a_vz = 1.0 - math.exp(-dt / params.vz_tau)
    pitch = state.pitch + a_att * (cmd.pitch - state.pitch)
    roll = state.roll + a_att * (cmd.roll - state.roll)
    yaw = wrap_angle(state.yaw + cmd.yaw_rate * dt)
    w = np.zeros(3) if wind is None else wind
    v = state.velocity
    acc_h = tilt_to_acceleration(pitch, roll, yaw, params.g)
    vx = v[0] + (acc_h[0] - params.drag * (v[0] - w[0])) * dt
    vy = v[1] + (acc_h[1] - params.drag * (v[1] - w[1])) * dt
    vz = v[2] + a_vz * (cmd.z_rate - v[2]) - params.drag * (v[2] - w[2]) * dt
    vel = np.array([vx, vy, vz])
    pos = state.position + vel * dt
    return VehicleState(pos, vel, roll, pitch, yaw, state.timestamp + dt)


@dataclass(frozen=True)
class WindModel:
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gust_sigma: float = 0.0
    gust_tau: float = 2.0
    seed: int = 0


class WindField:
    """Mean wind plus a first-order Gauss-Markov gust per axis."""

    def __init__(self, model: WindModel):
        self.model = model
        self._rng = np.random.default_rng([int(model.seed), 0x3141])
        self._gust = np.zeros(3)
        self._mean = np.asarray(model.mean, dtype=float)

    def sample(self, dt: float) -> np.ndarray:
        m = self.model
        if m.gust_sigma > 0.0:
            k = dt / m.gust_tau
            self._gust = self._gust * (1.0 - k) + m.gust_sigma * math.sqrt(2.0 * k) * self._rng.standard_normal(3)
            self._gust[2] *= 0.3
        return self._mean + self._gust


def with_timestamp(state: VehicleState, t: float) -> VehicleState:
    return replace(state, timestamp=t)
