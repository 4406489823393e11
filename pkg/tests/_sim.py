"""Small scene builders shared by the unit tests."""

import math

import numpy as np

from airvtr.se3 import RigidTransform, euler_to_matrix
from airvtr.world import StereoCameraModel, generate_world, gimbal_fk, observe

CLEAN = StereoCameraModel(pixel_sigma=0.0)
T_SV_DOWN60 = gimbal_fk((0.0, math.radians(60.0), 0.0))


def field_world(seed=3, extent=(-30.0, 150.0, -40.0, 40.0), density=0.5):
    return generate_world(seed, extent, density, 0.2)


def vehicle_pose(x, y=0.0, z=12.0, yaw=0.0):
    return RigidTransform(euler_to_matrix(yaw, 0.0, 0.0), (x, y, z))


def capture(world, T_wv, camera=CLEAN, T_sv=T_SV_DOWN60, seed=0, t=0.0):
    return observe(world, camera, T_wv @ T_sv.inverse(), seed, t)


def straight_flight(world, length=100.0, step=1 / 3, camera=CLEAN, z=12.0, seed=0):
    """Frames and ground-truth vehicle poses along +x."""
    out = []
    n = int(round(length / step)) + 1
    for k in range(n):
        T_wv = vehicle_pose(k * step, z=z)
        out.append((capture(world, T_wv, camera, seed=[seed, k], t=k / 15), T_wv))
    return out


def stereo_pair(world, T_target, T_live, camera=CLEAN, seed=0):
    """Target camera-frame points, live observations and the true T_live_target (camera frames)."""
    ft = capture(world, T_target, CLEAN)
    fl = capture(world, T_live, camera, seed=seed)
    from airvtr.world import triangulate

    P = triangulate(ft.uv, ft.disparity, CLEAN)
    T_true = (T_live @ T_SV_DOWN60.inverse()).inverse() @ (T_target @ T_SV_DOWN60.inverse())
    return ft, fl, P, T_true


def planted_outlier_problem(rng, n=150, outlier_fraction=0.3, sigma=0.5, camera=None):
    """Target points at ~10 m depth, noisy projections, a share replaced by garbage."""
    camera = camera or StereoCameraModel()
    P = np.column_stack([rng.uniform(-6, 6, n), rng.uniform(-3, 3, n), rng.uniform(8, 12, n)])
    T = RigidTransform.from_rotvec(rng.normal(0, 0.05, 3), rng.normal(0, 0.5, 3))
    obs = camera.project(T.apply(P)) + rng.normal(0, sigma, (n, 3))
    k = int(outlier_fraction * n)
    out = rng.choice(n, k, replace=False)
    obs[out, 0] = rng.uniform(0, camera.width, k)
    obs[out, 1] = rng.uniform(0, camera.height, k)
    obs[out, 2] = rng.uniform(2, 8, k)
    return P, obs, T, out


def tiny_scenario(**sections):
    """Short out-and-back scenario (25 m) for end-to-end tests."""
    from dataclasses import replace

    from airvtr.scenario import Scenario, TeachConfig, WorldConfig

    base = Scenario(
        name="tiny",
        world=replace(WorldConfig(), extent=(-20.0, 50.0, -25.0, 25.0), boxes=()),
        teach=replace(TeachConfig(), waypoints=((0.0, 0.0), (25.0, 0.0))),
    )
    return replace(base, **sections)
