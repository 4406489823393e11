"""Scenario runner: simulated learn flight, return flight and metrics.

Timing: the plant integrates at ``sim.base_rate`` (150 Hz by default), the
controller runs at 50 Hz, stereo frames arrive at 15 Hz and gimbal joint
angles reach the estimator at 10 Hz (zero-order hold).

The learn phase is flown by a GPS-like tracker on ground truth. The return
phase is either scripted (the same tracker flies the reversed path with
offsets while the vision stack localises and steers the gimbal) or closed
loop (the path-following controller flies on the localisation chain alone).
"""

from __future__ import annotations

import copy
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import control as ctl
from .control import (
    ControllerGains,
    ControlCommand,
    EndOfPath,
    MissionEvent,
    MissionState,
    SafetyMonitor,
    SafetyTimeouts,
    compute_command,
    estimate_velocity,
    gimbal_command,
    hover_reference,
    reference_from_chain,
    state_machine_step,
    tilt_commands,
)
from .graph import PoseGraph, save_graph
from .localization import (
    LocalizationConfig,
    apply_localization,
    camera_error_angles,
    camera_frame_error,
    localize,
    migrate_landmarks,
    start_chain,
    update_on_vo,
    with_leaf,
)
from .metrics import MetricsReport, comparison_table, emit
from .scenario import ConfigError, Scenario, with_parameter
from .se3 import RigidTransform, rotation_magnitude, wrap_angle, yaw_of
from .vo import KeyframePolicy, MatchConfig, MlesacConfig, VisualOdometry, VOConfig
from .world import (
    Box,
    GimbalSim,
    PlantParams,
    StereoCameraModel,
    VehicleState,
    WindField,
    WindModel,
    generate_world,
    observe,
    step_dynamics,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_SAFETY, EXIT_CONFIG = 0, 2, 3

# RNG stream tags
_FRAME_NOISE, _VO, _LOC, _WIND = 11, 12, 13, 14


# --------------------------------------------------------------------------
# Polyline helpers
# --------------------------------------------------------------------------


class Polyline:
    """Piecewise-linear 3D path parameterised by arc length."""

    def __init__(self, points):
        P = np.asarray(points, dtype=float)
        keep = np.r_[True, np.linalg.norm(np.diff(P, axis=0), axis=1) > 1e-9]
        self.points = P[keep]
        seg = np.diff(self.points, axis=0)
        self.lengths = np.linalg.norm(seg, axis=1)
        self.cum = np.r_[0.0, np.cumsum(self.lengths)]
        self.length = float(self.cum[-1])
        self.dirs = seg / np.maximum(self.lengths, 1e-12)[:, None] if len(seg) else np.zeros((0, 3))

    def segment(self, s: float) -> int:
        return int(min(max(np.searchsorted(self.cum, s, side="right") - 1, 0), len(self.lengths) - 1))

    def point(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = self.segment(s)
        return self.points[i] + self.dirs[i] * (s - self.cum[i])

    def tangent(self, s: float) -> np.ndarray:
        return self.dirs[self.segment(min(max(s, 0.0), self.length))]

    def project(self, p: np.ndarray) -> tuple[float, float]:
        """(arc length of the closest point, distance to it)."""
        a = self.points[:-1]
        d = p - a
        u = np.clip(np.einsum("ij,ij->i", d, self.dirs), 0.0, self.lengths)
        q = a + self.dirs * u[:, None]
        dist = np.linalg.norm(q - p, axis=1)
        i = int(np.argmin(dist))
        return float(self.cum[i] + u[i]), float(dist[i])

    def distance(self, p: np.ndarray) -> float:
        return self.project(p)[1]

    def truncated(self, s_end: float) -> "Polyline":
        s_end = min(max(s_end, 0.0), self.length)
        i = self.segment(s_end)
        return Polyline(np.vstack([self.points[: i + 1], self.point(s_end)]))

    def reversed(self) -> "Polyline":
        return Polyline(self.points[::-1])


def speed_profile(path: Polyline, s: float, v_max: float, a_max: float, v_min: float) -> float:
    """Cruise speed limited so the vehicle can slow to v_min at every corner and the end."""
    corners = path.cum[1:]
    ahead = corners[corners >= s - 1e-9]
    behind = path.cum[1:-1][path.cum[1:-1] <= s]
    d = float(ahead[0] - s) if len(ahead) else 0.0
    v = math.sqrt(v_min**2 + 2.0 * a_max * max(d, 0.0))
    if len(behind):
        v = min(v, math.sqrt(v_min**2 + 2.0 * a_max * max(s - float(behind[-1]), 0.0)))
    else:
        v = min(v, math.sqrt(v_min**2 + 2.0 * a_max * max(s, 0.0)))
    return min(v_max, v)


# --------------------------------------------------------------------------
# Ground-truth tracker (learn phase and scripted return)
# --------------------------------------------------------------------------


@dataclass
class CarrotTracker:
    """PD tracker on ground truth following a carrot along a polyline.

    ``heading_offset`` is added to the travel direction to get the commanded
    heading (pi flies the path backwards).
    """

    path: Polyline
    speed: float
    accel_limit: float = 2.0
    min_speed: float = 0.5
    yaw_rate_limit: float = math.radians(45.0)
    heading_offset: float = 0.0
    kp: float = 1.0
    kd: float = 1.8
    kz: float = 1.0
    drag: float = 0.2
    max_tilt: float = math.radians(20.0)
    lead: float = 3.0
    s: float = 0.0
    wait_for_altitude: bool = True

    def desired_heading(self) -> float:
        d = self.path.tangent(self.s)
        return wrap_angle(math.atan2(d[1], d[0]) + self.heading_offset)

    @property
    def finished(self) -> bool:
        return self.s >= self.path.length - 1e-9

    def update(self, state: VehicleState, dt: float, g: float) -> ControlCommand:
        p = state.position
        s_vehicle, _ = self.path.project(p)
        target = self.path.point(self.s)
        ready = not self.wait_for_altitude or abs(p[2] - target[2]) < 0.3
        heading_err = wrap_angle(self.desired_heading() - state.yaw)
        if ready and abs(heading_err) < math.radians(20.0):
            self.wait_for_altitude = False
            v = speed_profile(self.path, self.s, self.speed, self.accel_limit, self.min_speed)
            self.s = min(self.path.length, self.s + v * dt, max(s_vehicle, self.s) + self.lead)
        else:
            v = 0.0
        target = self.path.point(self.s)
        v_c = self.path.tangent(self.s) * (v if not self.finished else 0.0)
        e = target - p
        ev = v_c - state.velocity
        a = self.kp * e[:2] + self.kd * ev[:2] + self.drag * state.velocity[:2]
        theta, phi, _ = tilt_commands(a[0], a[1], state.yaw, g)
        theta = min(self.max_tilt, max(-self.max_tilt, theta))
        phi = min(self.max_tilt, max(-self.max_tilt, phi))
        z_rate = self.kz * e[2] + v_c[2]
        yaw_rate = min(self.yaw_rate_limit, max(-self.yaw_rate_limit, 2.0 * heading_err))
        return ControlCommand(z_rate, yaw_rate, theta, phi)


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    report: MetricsReport
    summary: dict
    exit_code: int
    graph: PoseGraph | None = None
    output_dir: Path | None = None
    cache_misses: int = 0


def build_camera(s: Scenario) -> StereoCameraModel:
    c = s.camera
    return StereoCameraModel(
        c.focal, c.cx, c.cy, c.baseline, c.width, c.height, c.pixel_sigma, c.max_range, c.min_disparity,
        c.detection_probability,
    )


def build_vo_config(s: Scenario) -> VOConfig:
    v = s.vo
    return VOConfig(
        match=MatchConfig(v.confusion_rate, v.scale_sigma),
        mlesac=MlesacConfig(v.inlier_threshold, v.max_hypotheses, v.confidence, v.min_inliers),
        keyframe=KeyframePolicy(v.keyframe_min_inliers, v.keyframe_max_translation, math.radians(v.keyframe_max_rotation_deg)),
        window_size=v.window_size,
        refine=v.refine,
        refine_landmarks=v.refine_landmarks,
    )


def build_localization_config(s: Scenario) -> LocalizationConfig:
    L, v = s.localization, s.vo
    return LocalizationConfig(
        window_radius=L.window_radius,
        trunk_search_radius=L.trunk_search_radius,
        failure_limit=L.failure_limit,
        min_inliers=L.min_inliers,
        max_prior_translation=L.max_prior_translation,
        max_prior_rotation=math.radians(L.max_prior_rotation_deg),
        latency_frames=L.latency_frames,
        match=MatchConfig(v.confusion_rate, v.scale_sigma),
        mlesac=MlesacConfig(v.inlier_threshold, v.max_hypotheses, v.confidence, v.min_inliers),
    )


def build_gains(s: Scenario) -> ControllerGains:
    c = s.controller
    return ControllerGains(
        c.zeta_z, c.tau_z, c.tau_psi, c.zeta_theta, c.tau_theta, s.return_.speed, 9.81, math.radians(c.max_tilt_deg)
    )


class Simulation:
    """One learn flight followed by one return flight."""

    def __init__(self, scenario: Scenario):
        s = self.scenario = scenario
        w = s.world
        boxes = tuple(Box(tuple(b[:3]), tuple(b[3:])) for b in w.boxes)
        self.world = generate_world(w.seed, w.extent, w.density, w.height_sigma, boxes)
        self.camera = build_camera(s)
        self.plant = PlantParams(s.plant.attitude_tau, s.plant.vz_tau, s.plant.drag)
        self.wind = WindField(WindModel(s.wind.mean, s.wind.gust_sigma, s.wind.gust_tau, seed=s.seed * 1000 + _WIND))
        self.dt = 1.0 / s.sim.base_rate
        self.control_every = int(round(s.sim.base_rate / s.sim.control_rate))
        self.frame_every = int(round(s.sim.base_rate / s.sim.frame_rate))
        self.gimbal_every = int(round(s.sim.base_rate / s.gimbal.sample_rate)) if s.gimbal.sample_rate > 0 else 0

        wp = np.array([[x, y, s.teach.altitude] for x, y in s.teach.waypoints], dtype=float)
        path = Polyline(wp)
        if s.teach.return_trigger is not None:
            path = path.truncated(s.teach.return_trigger)
        self.teach_path = path

        d0 = path.dirs[0]
        yaw0 = math.atan2(d0[1], d0[0])
        self.state = VehicleState(position=path.points[0].copy(), yaw=yaw0)
        self.gimbal = GimbalSim(
            tau=s.gimbal.joint_tau, yaw_setpoint=yaw0, pitch_setpoint=math.radians(s.gimbal.learn_pitch_deg)
        )
        self.gimbal.reset_to(self.state.rotation)
        self.sampled_T_sv = self.gimbal.state.T_sv
        self.cmd = ctl.HOVER
        self.n = 0
        self.frame_no = 0
        self.mission = MissionState.IDLE

        self.graph = PoseGraph()
        self.vo = VisualOdometry(self.graph, self.camera, build_vo_config(s), seed=[s.seed, _VO])
        self.report = MetricsReport()
        # ground truth, for scoring only
        self.gt_vertex_pose: dict[int, RigidTransform] = {}
        self.priv_points: list[np.ndarray] = []
        self.last_position = self.state.position.copy()
        self.teach_done = False

    # ------------------------------------------------------------ plumbing

    @property
    def t(self) -> float:
        return self.n * self.dt

    def _transition(self, event: MissionEvent, detail: str = "") -> None:
        new = state_machine_step(self.mission, event)
        self.report.add("events", self.t, "transition", f"{self.mission.value}->{new.value}{' ' + detail if detail else ''}")
        self.mission = new

    def _physics(self) -> None:
        self.n += 1
        wind = self.wind.sample(self.dt)
        self.state = step_dynamics(self.state, self.cmd, wind, self.dt, self.plant)
        self.gimbal.step(self.state.rotation, self.dt)
        if self.gimbal_every and self.n % self.gimbal_every == 0:
            self.sampled_T_sv = self.gimbal.state.T_sv

    def _capture(self):
        self.frame_no += 1
        T_sv_true = self.gimbal.state.T_sv
        if not self.gimbal_every:
            self.sampled_T_sv = T_sv_true
        T_wc = self.state.pose @ T_sv_true.inverse()
        frame = observe(self.world, self.camera, T_wc, seed=[self.scenario.seed, _FRAME_NOISE, self.frame_no], timestamp=self.t)
        moved = float(np.linalg.norm(self.state.position - self.last_position))
        self.last_position = self.state.position.copy()
        return frame, moved

    def _timed(self, stage, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        self.report.time(stage, (time.perf_counter() - t0) * 1e3)
        return out

    # --------------------------------------------------------------- learn

    def run_teach(self) -> None:
        s = self.scenario
        self._transition(MissionEvent.START_LEARN)
        self.graph.begin_run(privileged=True)
        tracker = CarrotTracker(
            self.teach_path, s.teach.speed, s.teach.accel_limit, s.teach.min_speed,
            math.radians(s.teach.yaw_rate_limit_deg), drag=s.plant.drag, wait_for_altitude=False,
        )
        settle = 0.0
        limit = 10.0 * self.teach_path.length / max(s.teach.min_speed, 0.1) + 60.0
        while True:
            self._physics()
            self.gimbal.follow_vehicle_yaw(self.state.yaw, self.dt, s.gimbal.yaw_follow_tau)
            if self.n % self.control_every == 0:
                self.cmd = tracker.update(self.state, self.dt * self.control_every, self.plant.g)
            if self.n % self.frame_every == 0:
                frame, moved = self._capture()
                step = self._timed("vo", self.vo.process, frame, self.sampled_T_sv)
                if step.keyframe is not None:
                    self.gt_vertex_pose[step.keyframe] = self.state.pose
                    self.priv_points.append(self.state.position.copy())
                ct = self.teach_path.distance(self.state.position)
                p = self.state.position
                self.report.add(
                    "frames", self.t, "learn", p[0], p[1], p[2], ct, float("nan"), -1,
                    int(step.success), step.inliers, int(step.keyframe is not None), moved,
                )
            end = self.teach_path.points[-1]
            if tracker.finished and np.linalg.norm(self.state.position - end) < 0.5 and np.linalg.norm(self.state.velocity) < 0.3:
                settle += self.dt
                if settle > 1.0 and self.n % self.frame_every == 0:
                    break
            if self.t > limit:
                raise RuntimeError("learn flight did not reach the end of the path")
        self.teach_done = True

    # -------------------------------------------------------------- return

    def run_return(self, graph_path: Path | None = None) -> int:
        """Fly the return; returns the exit code."""
        s = self.scenario
        rc = s.return_
        g = self.graph
        self._transition(MissionEvent.RETURN_REQUESTED)
        last_priv = g.privileged_path[-1]
        g.begin_run(privileged=False)

        # memory manager: persist the map, then page payloads around the trunk
        tmp = None
        if graph_path is None:
            tmp = tempfile.TemporaryDirectory()
            graph_path = Path(tmp.name) / "graph.bin"
        save_graph(g, graph_path)
        misses_before = g.cache_misses

        loc_cfg = build_localization_config(s)
        gains = build_gains(s)
        monitor = SafetyMonitor(SafetyTimeouts(
            s.safety.command_timeout, s.safety.localization_timeout, s.safety.state_timeout, loc_cfg.failure_limit
        ))
        priv_truth = Polyline(np.array(self.priv_points))

        scripted = rc.mode == "scripted-offset"
        tracker = None
        if scripted:
            pts = self.teach_path.reversed().points.copy()
            pts[:, 2] += rc.altitude_offset
            # lateral offset to the left of the return direction
            if rc.lateral_offset:
                rev = Polyline(pts)
                normals = np.column_stack([-rev.dirs[:, 1], rev.dirs[:, 0], np.zeros(len(rev.dirs))])
                shift = np.vstack([normals[0], (normals[:-1] + normals[1:]) / 2.0, normals[-1]])
                pts = rev.points + rc.lateral_offset * shift
            tracker = CarrotTracker(
                Polyline(pts), rc.speed, s.teach.accel_limit, s.teach.min_speed,
                math.radians(s.teach.yaw_rate_limit_deg), heading_offset=math.pi, drag=s.plant.drag,
            )

        chain = None
        odom = RigidTransform.identity()  # T_odom_live
        hist_t: list[float] = []
        hist_p: list[np.ndarray] = []
        hist_R: list[np.ndarray] = []
        pending: list[tuple[int, object, RigidTransform]] = []
        first = True
        start_t = self.t
        hover_t = None
        exit_code = EXIT_OK
        last_cmd_t = self.t
        hover_target = None

        while True:
            self._physics()
            if self.n % self.frame_every == 0:
                frame, moved = self._capture()
                T_sv_est = self.sampled_T_sv
                step = self._timed("vo", self.vo.process, frame, T_sv_est, force_keyframe=first)
                if first:
                    if step.keyframe is None:
                        raise RuntimeError("could not create the first return vertex")
                    chain = start_chain(g, last_priv, step.keyframe, g.edge_transform(last_priv, step.keyframe), self.t)
                    first = False
                elif step.success:
                    chain = update_on_vo(chain, step.delta, g, self.t, loc_cfg.trunk_search_radius)
                    pending = [(k, r, step.delta @ T) for k, r, T in pending]
                if step.success:
                    odom = odom @ (step.delta.inverse() if step.delta is not None else RigidTransform.identity())
                    hist_t.append(self.t)
                    hist_p.append(odom.translation.copy())
                    hist_R.append(odom.rotation.copy())
                    del hist_t[:-10], hist_p[:-10], hist_R[:-10]

                # keep payloads resident around the trunk before anyone reads them
                keep = [v for v, _ in g.local_window(chain.trunk, loc_cfg.window_radius + 3)]
                g.prefetch(keep)
                g.evict(set(keep))

                loc = None
                if step.keyframe is not None:
                    chain = with_leaf(chain, step.keyframe)
                    mmap = self._timed("migration", migrate_landmarks, g, chain.trunk, loc_cfg.window_radius)
                    loc = self._timed(
                        "localization", localize, frame, mmap, chain.T_leaf_trunk, self.camera, T_sv_est,
                        g.vertex(chain.trunk).T_sv, loc_cfg, [s.seed, _LOC, self.frame_no],
                    )
                    pending.append((loc_cfg.latency_frames, loc, RigidTransform.identity()))
                    self._record_localization(loc, chain, step.keyframe, T_sv_est)
                ready = [p for p in pending if p[0] <= 0]
                pending = [(k - 1, r, T) for k, r, T in pending if k > 0]
                for _, r, since in ready:
                    chain = apply_localization(chain, r, g, self.t, since, loc_cfg.trunk_search_radius)

                if s.gimbal.control and chain is not None:
                    E = camera_error_angles(camera_frame_error(chain, g, T_sv_est))
                    gc = gimbal_command(E, self.gimbal.yaw_setpoint, self.gimbal.pitch_setpoint, s.gimbal.gain)
                    self.gimbal.yaw_setpoint, self.gimbal.pitch_setpoint = gc.yaw_setpoint, gc.pitch_setpoint

                p = self.state.position
                ct = priv_truth.distance(p)
                ct_est = self._estimated_cross_track(chain)
                self.report.add(
                    "frames", self.t, "return", p[0], p[1], p[2], ct, ct_est, chain.trunk,
                    int(step.success), step.inliers, int(step.keyframe is not None), moved,
                )

            if self.n % self.control_every == 0 and chain is not None:
                if self.mission is MissionState.RETURN:
                    if scripted:
                        self.cmd = tracker.update(self.state, self.dt * self.control_every, self.plant.g)
                        end = tracker.path.points[-1]
                        if tracker.finished and np.linalg.norm(self.state.position - end) < rc.hover_radius:
                            self._transition(MissionEvent.PATH_START_REACHED)
                            hover_t = self.t
                    else:
                        t0 = time.perf_counter()
                        self.cmd, reached = self._path_command(chain, gains, hist_t, hist_p, hist_R)
                        self.report.time("control", (time.perf_counter() - t0) * 1e3)
                        if reached:
                            self._transition(MissionEvent.PATH_START_REACHED)
                            hover_t = self.t
                            hover_target = chain.trunk
                elif self.mission is MissionState.HOVER:
                    if scripted:
                        self.cmd = tracker.update(self.state, self.dt * self.control_every, self.plant.g)
                    else:
                        self.cmd = self._hover_command(chain, gains, hist_t, hist_p, hist_R, hover_target)
                last_cmd_t = self.t
                c = self.cmd
                self.report.add("commands", self.t, c.z_rate, c.yaw_rate, c.pitch, c.roll, int(c.saturated))

                status = monitor.check(
                    last_cmd_t, chain.last_localization_time, chain.last_vo_time, self.t, chain.consecutive_failures
                )
                if not status.ok:
                    self._transition(MissionEvent.SAFETY_FAULT, status.reason)
                    self.report.status = "aborted"
                    self.report.exit_reason = status.reason
                    self.cmd = ctl.HOVER
                    exit_code = EXIT_SAFETY
                    break

            if hover_t is not None and self.t - hover_t >= rc.hover_hold:
                break
            if self.t - start_t > rc.max_duration:
                self.report.status = "timeout"
                self.report.exit_reason = "return did not finish within max_duration"
                self.report.add("events", self.t, "timeout", self.report.exit_reason)
                break

        self.cache_misses = g.cache_misses - misses_before
        self.report.add("events", self.t, "memory", f"cache_misses={self.cache_misses} loads={g.loads}")
        if tmp is not None:
            g.prefetch(list(g.vertices))
            tmp.cleanup()
            g.attach_store(None, {})
        return exit_code

    # ------------------------------------------------------------- helpers

    def _leaf_state(self, chain, hist_t, hist_p, hist_R, window):
        T_trunk_live = chain.T_leaf_trunk.inverse()
        p = T_trunk_live.translation
        v = np.zeros(3)
        if len(hist_t) >= 2 and hist_t[-1] - hist_t[max(0, len(hist_t) - window)] > 1e-3:
            v_odom = estimate_velocity(hist_t, np.array(hist_p), window).velocity
            R_trunk_odom = T_trunk_live.rotation @ hist_R[-1].T
            v = R_trunk_odom @ v_odom
            p = p + v * (self.t - hist_t[-1])
        return p, v, yaw_of(T_trunk_live)

    def _path_command(self, chain, gains, hist_t, hist_p, hist_R):
        p, v, yaw = self._leaf_state(chain, hist_t, hist_p, hist_R, self.scenario.controller.velocity_window)
        try:
            ref = reference_from_chain(chain, self.graph, gains, direction=-1)
        except EndOfPath:
            ref = hover_reference(np.zeros(3))
            if np.linalg.norm(p) < self.scenario.return_.hover_radius:
                return compute_command(p, v, yaw, ref, gains), True
        return compute_command(p, v, yaw, ref, gains), False

    def _hover_command(self, chain, gains, hist_t, hist_p, hist_R, target):
        p, v, yaw = self._leaf_state(chain, hist_t, hist_p, hist_R, self.scenario.controller.velocity_window)
        offset = self.graph.compose_privileged(chain.trunk, target).translation
        return compute_command(p, v, yaw, hover_reference(offset), gains)

    def _estimated_cross_track(self, chain) -> float:
        g = self.graph
        p = chain.T_leaf_trunk.inverse().translation
        best = float("inf")
        for vid, T_tv in g.local_window(chain.trunk, 1):
            if vid == chain.trunk:
                continue
            q = T_tv.translation
            L2 = float(q @ q)
            if L2 < 1e-12:
                continue
            u = min(1.0, max(0.0, float(p @ q) / L2))
            best = min(best, float(np.linalg.norm(p - u * q)))
        return best if math.isfinite(best) else float(np.linalg.norm(p))

    def _record_localization(self, loc, chain, vertex, T_sv_live) -> None:
        g = self.graph
        veh = cam = gt_err = float("nan")
        if loc.success:
            veh = rotation_magnitude(loc.T_leaf_trunk)
            T_fa = T_sv_live @ loc.T_leaf_trunk @ g.vertex(loc.trunk).T_sv.inverse()
            cam = rotation_magnitude(T_fa)
            T_true = self.state.pose.inverse() @ self.gt_vertex_pose[loc.trunk]
            gt_err = float(np.linalg.norm(T_true.translation - loc.T_leaf_trunk.translation))
        self.report.add(
            "localizations", self.t, "return", vertex, loc.trunk, int(loc.success), loc.inliers, loc.matches,
            loc.corrupted_inliers, veh, cam, gt_err,
        )


# --------------------------------------------------------------------------
# Public entry points
# --------------------------------------------------------------------------


def _teach(scenario: Scenario, cache: dict | None) -> Simulation:
    key = scenario.teach_key()
    if cache is not None and key in cache:
        sim = copy.deepcopy(cache[key])
        sim.scenario = scenario
        return sim
    sim = Simulation(scenario)
    sim.run_teach()
    if cache is not None:
        cache[key] = copy.deepcopy(sim)
    return sim


def run_scenario(
    scenario: Scenario,
    output_dir: str | Path | None = None,
    teach_cache: dict | None = None,
) -> RunResult:
    """Learn, return and (optionally) write metrics under ``output_dir``."""
    sim = _teach(scenario, teach_cache)
    out = Path(output_dir) if output_dir is not None else None
    graph_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if scenario.output.save_graph:
            graph_path = out / "graph.bin"
    try:
        code = sim.run_return(graph_path)
    finally:
        if out is not None:
            emit(sim.report, out, scenario.output.format)
    return RunResult(scenario, sim.report, sim.report.summary(), code, sim.graph, out, sim.cache_misses)


def sweep(
    scenario: Scenario,
    parameter: str,
    values,
    output_dir: str | Path | None = None,
    teach_cache: dict | None = None,
) -> list[RunResult]:
    """One run per value; the learn flight is shared when it does not depend on the parameter."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    variants = [with_parameter(scenario, parameter, v) for v in values]
    cache = {} if teach_cache is None else teach_cache
    results = []
    for v, sc in zip(values, variants):
        sub = None if output_dir is None else Path(output_dir) / f"{parameter}={v:g}"
        results.append(run_scenario(sc, sub, cache))
    if output_dir is not None:
        table = comparison_table(parameter, values, [r.summary for r in results])
        Path(output_dir, "sweep_summary.txt").write_text(table)
    return results
