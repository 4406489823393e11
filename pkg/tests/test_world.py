import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from airvtr.control import ControlCommand
from airvtr.se3 import RigidTransform, euler_to_matrix, rot_y, rot_z
from airvtr.world import (
    BODY_TO_OPTICAL,
    Box,
    FarPointError,
    GimbalLimitError,
    GimbalLinks,
    GimbalSim,
    PlantParams,
    StereoCameraModel,
    VehicleState,
    WindField,
    WindModel,
    generate_world,
    gimbal_fk,
    gimbal_ik,
    observe,
    step_dynamics,
    tilt_to_acceleration,
    triangulate,
)

CAM = StereoCameraModel(pixel_sigma=0.0)


def looking_forward(position=(0.0, 0.0, 0.0)):
    # optical frame looking along world +x
    return RigidTransform(BODY_TO_OPTICAL.T, position)


def _world_with(points):
    from airvtr.world import LandmarkWorld

    pts = np.asarray(points, dtype=float)
    return LandmarkWorld(np.arange(len(pts)), pts, (-100, 100, -100, 100, -10, 10), 0)


# --- landmarks -------------------------------------------------------------


def test_world_generation_deterministic():
    a = generate_world(3, (0, 50, 0, 50), 0.2, 0.1)
    b = generate_world(3, (0, 50, 0, 50), 0.2, 0.1)
    assert a.positions.tobytes() == b.positions.tobytes()
    np.testing.assert_array_equal(a.ids, b.ids)
    c = generate_world(4, (0, 50, 0, 50), 0.2, 0.1)
    assert len(c) != len(a) or not np.array_equal(c.positions, a.positions)


@pytest.mark.parametrize("seed", range(5))
def test_world_count_is_poisson(seed):
    w = generate_world(seed, (0, 100, 0, 100), 0.1)
    # Poisson(1000): 4 sigma band
    assert abs(len(w) - 1000) <= 4 * math.sqrt(1000)
    assert np.all((w.positions[:, 0] >= 0) & (w.positions[:, 0] <= 100))
    assert len(np.unique(w.ids)) == len(w)


def test_world_rejects_zero_area():
    with pytest.raises(ValueError):
        generate_world(0, (0, 0, 0, 10), 0.1)
    with pytest.raises(ValueError):
        generate_world(0, (0, 10, 5, 5), 0.1)


def test_box_lifts_landmarks():
    box = Box((10.0, 10.0, 0.0), (20.0, 20.0, 2.6))
    w = generate_world(1, (0, 30, 0, 30), 0.5, 0.0, boxes=[box])
    inside = box.contains_xy(w.positions[:, :2])
    assert inside.any()
    assert np.all(w.positions[inside, 2] == 2.6)
    assert np.all(w.positions[~inside, 2] == 0.0)


# --- stereo camera ---------------------------------------------------------


def test_disparity_of_point_ten_metres_ahead():
    f = observe(_world_with([[10.0, 0.0, 0.0]]), CAM, looking_forward(), seed=0)
    assert len(f) == 1
    assert f.disparity[0] == pytest.approx(350 * 0.12 / 10.0, abs=1e-12)
    np.testing.assert_allclose(f.uv[0], [CAM.cx, CAM.cy], atol=1e-12)


def test_point_behind_camera_is_absent():
    f = observe(_world_with([[-5.0, 0.0, 0.0], [5.0, 0.0, 0.0]]), CAM, looking_forward(), seed=0)
    assert list(f.ids) == [1]


def test_observations_stay_inside_both_images():
    w = generate_world(2, (-30, 30, -30, 30), 1.0, 0.2)
    T = RigidTransform(euler_to_matrix(0.3, math.radians(60), 0.0) @ BODY_TO_OPTICAL.T, (0, 0, 10))
    cam = StereoCameraModel(pixel_sigma=0.5)
    f = observe(w, cam, T, seed=[1, 2])
    assert len(f) > 100
    u, v, d = f.uv[:, 0], f.uv[:, 1], f.disparity
    assert np.all((u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height))
    assert np.all((u - d >= 0) & (d > 0))


def test_observe_noise_is_deterministic_and_has_configured_sigma():
    w = generate_world(2, (-30, 30, -30, 30), 2.0, 0.0)
    T = RigidTransform(rot_z(0.0) @ rot_y(math.radians(80)) @ BODY_TO_OPTICAL.T, (0, 0, 15))
    noisy = StereoCameraModel(pixel_sigma=0.3)
    a = observe(w, noisy, T, seed=5)
    b = observe(w, noisy, T, seed=5)
    assert a.uv.tobytes() == b.uv.tobytes()
    clean = observe(w, CAM, T, seed=5)
    common, ia, ic = np.intersect1d(a.ids, clean.ids, return_indices=True)
    du = a.uv[ia] - clean.uv[ic]
    assert np.std(du) == pytest.approx(0.3, rel=0.1)


def test_triangulation_round_trip_and_far_rejection():
    uv = np.array([[336.0, 188.0], [100.0, 50.0]])
    P = triangulate(uv, np.array([4.2, 2.1]), CAM)
    assert P[0, 2] == pytest.approx(10.0, abs=1e-12)
    assert P[0, 0] == 0.0 and P[0, 1] == 0.0
    assert P[1, 2] == pytest.approx(20.0, abs=1e-12)
    back = CAM.project(P)
    np.testing.assert_allclose(back[:, :2], uv, atol=1e-9)
    with pytest.raises(FarPointError):
        triangulate(uv[:1], np.array([0.1]), CAM)


def test_zero_noise_observe_triangulates_back_to_landmarks():
    w = generate_world(9, (-20, 20, -20, 20), 1.0, 0.3)
    T = RigidTransform(rot_y(math.radians(70)) @ BODY_TO_OPTICAL.T, (0, 0, 8))
    f = observe(w, CAM, T, seed=0)
    P = T.apply(triangulate(f.uv, f.disparity, CAM))
    np.testing.assert_allclose(P, w.positions[f.ids], atol=1e-6)


# --- gimbal ----------------------------------------------------------------


def fk_oracle(roll, pitch, yaw, L=GimbalLinks()):
    """Accumulate rotation and translation link by link."""
    R = np.eye(3)
    p = np.array(L.mount, dtype=float)
    for rot, off in (
        (Rotation.from_euler("z", yaw), L.yaw_to_roll),
        (Rotation.from_euler("x", roll), L.roll_to_pitch),
        (Rotation.from_euler("y", pitch), L.pitch_to_camera),
    ):
        R = R @ rot.as_matrix()
        p = p + R @ np.asarray(off)
    return R @ BODY_TO_OPTICAL.T, p


def test_fk_zero_angles_is_mount_chain():
    T_vs = gimbal_fk((0.0, 0.0, 0.0)).inverse()
    L = GimbalLinks()
    np.testing.assert_allclose(T_vs.rotation, BODY_TO_OPTICAL.T, atol=1e-15)
    offset = np.sum([L.mount, L.yaw_to_roll, L.roll_to_pitch, L.pitch_to_camera], axis=0)
    np.testing.assert_allclose(T_vs.translation, offset, atol=1e-15)


def test_fk_yaw_quarter_turn_rotates_optical_axis():
    T_vs = gimbal_fk((0.0, 0.0, math.pi / 2)).inverse()
    np.testing.assert_allclose(T_vs.rotation[:, 2], [0.0, 1.0, 0.0], atol=1e-15)


def test_fk_matches_link_oracle():
    rng = np.random.default_rng(0)
    L = GimbalLinks()
    for _ in range(200):
        roll = rng.uniform(*L.roll_limits)
        pitch = rng.uniform(*L.pitch_limits)
        yaw = rng.uniform(*L.yaw_limits)
        T_vs = gimbal_fk((roll, pitch, yaw)).inverse()
        R, p = fk_oracle(roll, pitch, yaw)
        np.testing.assert_allclose(T_vs.rotation, R, atol=1e-12)
        np.testing.assert_allclose(T_vs.translation, p, atol=1e-12)


def test_fk_rejects_out_of_range_joint():
    with pytest.raises(GimbalLimitError):
        gimbal_fk((1.0, 0.0, 0.0))
    with pytest.raises(GimbalLimitError):
        gimbal_fk((0.0, 2.5, 0.0))


def test_ik_points_camera_at_world_setpoint():
    rng = np.random.default_rng(1)
    for _ in range(100):
        R_wv = euler_to_matrix(rng.uniform(-3, 3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3))
        yaw_w, pitch_w = rng.uniform(-3, 3), rng.uniform(0.3, 1.2)
        angles = gimbal_ik(R_wv, yaw_w, pitch_w)
        R_vs = gimbal_fk(angles).inverse().rotation
        R_body = R_wv @ R_vs @ BODY_TO_OPTICAL
        np.testing.assert_allclose(R_body, rot_z(yaw_w) @ rot_y(pitch_w), atol=1e-9)


def test_gimbal_sim_converges_to_setpoint():
    g = GimbalSim(yaw_setpoint=0.4, pitch_setpoint=1.0)
    R_wv = euler_to_matrix(0.1, 0.05, -0.02)
    for _ in range(100):
        g.step(R_wv, 0.01)
    target = gimbal_ik(R_wv, 0.4, 1.0)
    np.testing.assert_allclose((g.roll, g.pitch, g.yaw), target, atol=1e-3)


# --- plant -----------------------------------------------------------------


def test_hover_is_equilibrium():
    s = VehicleState(position=np.array([1.0, 2.0, 10.0]))
    for _ in range(300):
        s = step_dynamics(s, ControlCommand(), None, 1 / 150)
    np.testing.assert_array_equal(s.position, [1.0, 2.0, 10.0])
    np.testing.assert_array_equal(s.velocity, [0.0, 0.0, 0.0])


def test_constant_pitch_reaches_steady_acceleration():
    params = PlantParams(drag=0.0)
    theta, dt = 0.2, 1 / 150
    a = 1.0 - math.exp(-dt / params.attitude_tau)
    s = VehicleState()
    cmd = ControlCommand(pitch=theta)
    for k in range(1, 451):
        prev = s
        s = step_dynamics(s, cmd, None, dt, params)
        # closed-form first-order lag
        assert s.pitch == pytest.approx(theta * (1.0 - (1.0 - a) ** k), abs=1e-12)
    acc = (s.velocity[0] - prev.velocity[0]) / dt
    assert acc == pytest.approx(9.81 * math.sin(theta), abs=1e-6)


def test_dynamics_deterministic_and_zero_wind_matches_no_wind():
    cmd = ControlCommand(z_rate=0.5, yaw_rate=0.1, pitch=0.1, roll=-0.05)
    wf = WindField(WindModel(seed=3))
    a = b = VehicleState()
    for _ in range(200):
        a = step_dynamics(a, cmd, None, 1 / 150)
        b = step_dynamics(b, cmd, wf.sample(1 / 150), 1 / 150)
    assert a.position.tobytes() == b.position.tobytes()
    assert a.velocity.tobytes() == b.velocity.tobytes()


def test_gusts_are_seeded():
    m = WindModel(gust_sigma=1.0, seed=4)
    w1, w2 = WindField(m), WindField(m)
    s1 = np.array([w1.sample(0.1) for _ in range(50)])
    s2 = np.array([w2.sample(0.1) for _ in range(50)])
    np.testing.assert_array_equal(s1, s2)
    assert np.abs(s1).max() > 0.0


def test_dt_outside_range_rejected():
    for dt in (0.0, -0.01, 0.2):
        with pytest.raises(ValueError):
            step_dynamics(VehicleState(), ControlCommand(), None, dt)


def test_positive_pitch_accelerates_forward():
    np.testing.assert_allclose(tilt_to_acceleration(0.1, 0.0, 0.0), [9.81 * math.sin(0.1), 0.0], atol=1e-15)
    # positive roll tips the right side down, pushing toward body -y (right)
    assert tilt_to_acceleration(0.0, 0.1, 0.0)[1] < 0.0
