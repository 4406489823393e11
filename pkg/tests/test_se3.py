import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from airvtr.se3 import (
    AxisAngle,
    GimbalLockError,
    RigidTransform,
    compose,
    exp_so3,
    invert,
    log_so3,
    matrix_to_euler,
    rot_x,
    rot_y,
    rot_z,
    rotation_magnitude,
    translation_distance,
    wrap_angle,
    yaw_of,
)

finite = st.floats(-50.0, 50.0, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)


@st.composite
def transforms(draw):
    q = np.array([draw(st.floats(-1, 1)) for _ in range(4)])
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    R = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
    t = np.array([draw(finite) for _ in range(3)])
    return RigidTransform(R, t)


def homogeneous(T):
    M = np.eye(4)
    M[:3, :3] = T.rotation
    M[:3, 3] = T.translation
    return M


def test_compose_identity():
    T = RigidTransform.from_euler(0.3, -0.2, 0.1, (1, 2, 3))
    assert compose(RigidTransform.identity(), T).is_close(T, 1e-15)
    assert compose(T, invert(T)).is_close(RigidTransform.identity(), 1e-12)


@given(transforms(), transforms())
def test_compose_matches_homogeneous_product(A, B):
    C = compose(A, B)
    np.testing.assert_allclose(homogeneous(C), homogeneous(A) @ homogeneous(B), atol=1e-12, rtol=0)


@given(transforms(), transforms(), transforms())
def test_compose_associative(A, B, C):
    assert compose(compose(A, B), C).is_close(compose(A, compose(B, C)), 1e-9)


def test_invert_examples():
    assert invert(RigidTransform.identity()).is_close(RigidTransform.identity(), 0.0)
    T = invert(RigidTransform.from_translation(1, 2, 3))
    np.testing.assert_array_equal(T.translation, [-1, -2, -3])
    np.testing.assert_array_equal(T.rotation, np.eye(3))


@given(transforms())
def test_invert_oracle_and_involution(T):
    Ti = invert(T)
    np.testing.assert_allclose(Ti.rotation, T.rotation.T, atol=0)
    np.testing.assert_allclose(Ti.translation, -T.rotation.T @ T.translation, atol=1e-12)
    assert compose(T, Ti).is_close(RigidTransform.identity(), 1e-12)
    assert invert(Ti).is_close(T, 1e-9)


def test_yaw_examples():
    assert yaw_of(RigidTransform.identity()) == 0.0
    assert yaw_of(RigidTransform(rot_z(0.3))) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(GimbalLockError):
        yaw_of(RigidTransform(rot_y(math.pi / 2)))


@given(st.floats(-math.pi, math.pi, exclude_min=True))
def test_yaw_of_pure_yaw(psi):
    assert yaw_of(RigidTransform(rot_z(psi))) == pytest.approx(psi, abs=1e-12)


@given(transforms())
def test_yaw_matches_scipy_euler(T):
    zyx = Rotation.from_matrix(T.rotation).as_euler("ZYX")
    if abs(abs(zyx[1]) - math.pi / 2) < 1e-4:
        return
    yaw, pitch, roll = matrix_to_euler(T.rotation)
    assert abs(wrap_angle(yaw - zyx[0])) < 1e-9
    assert pitch == pytest.approx(zyx[1], abs=1e-9)
    assert abs(wrap_angle(roll - zyx[2])) < 1e-9


def test_rotation_magnitude_examples():
    assert rotation_magnitude(RigidTransform.identity()) == 0.0
    assert rotation_magnitude(RigidTransform(rot_z(math.pi / 2))) == pytest.approx(math.pi / 2, abs=1e-15)
    R = rot_x(0.1) @ rot_y(0.1)
    oracle = math.acos((np.trace(R) - 1.0) / 2.0)
    assert rotation_magnitude(RigidTransform(R)) == pytest.approx(oracle, abs=1e-9)


@given(transforms(), transforms())
def test_rotation_magnitude_conjugation_invariant(A, B):
    m = rotation_magnitude(A)
    conj = B.rotation @ A.rotation @ B.rotation.T
    assert rotation_magnitude(conj) == pytest.approx(m, abs=1e-9)
    assert 0.0 <= m <= math.pi


@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_exp_log_round_trip(v):
    w = np.array(v)
    if np.linalg.norm(w) > math.pi - 1e-3:
        return
    np.testing.assert_allclose(log_so3(exp_so3(w)), w, atol=1e-9)
    aa = AxisAngle.from_matrix(exp_so3(w))
    assert aa.angle == pytest.approx(np.linalg.norm(w), abs=1e-9)


def test_log_near_pi():
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    w = axis * (math.pi - 1e-7)
    np.testing.assert_allclose(exp_so3(log_so3(exp_so3(w))), exp_so3(w), atol=1e-9)


def test_construction_validates_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.01)
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3), [np.nan, 0, 0])
    # tiny drift is projected back onto SO(3)
    R = rot_z(0.4) + 1e-8
    T = RigidTransform(R)
    assert np.abs(T.rotation.T @ T.rotation - np.eye(3)).max() < 1e-12


def test_long_compose_chain_stays_orthonormal():
    step = RigidTransform.from_rotvec([0.013, -0.021, 0.017], [0.1, 0.0, 0.02])
    T = RigidTransform.identity()
    for _ in range(5000):
        T = T @ step
    assert np.abs(T.rotation.T @ T.rotation - np.eye(3)).max() <= 1e-9
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-9)


def test_transform_is_immutable():
    T = RigidTransform.from_translation(1, 2, 3)
    with pytest.raises(ValueError):
        T.translation[0] = 5.0
    assert translation_distance(T) == pytest.approx(math.sqrt(14))


def test_apply_points():
    T = RigidTransform(rot_z(math.pi / 2), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(T.apply(np.array([[1.0, 0.0, 0.0]])), [[1.0, 1.0, 0.0]], atol=1e-15)
