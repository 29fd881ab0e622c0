import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cicoloc.baselines import pose_step, relative_rows
from cicoloc.errors import CoincidentPoints
from cicoloc.models import (BEARING_RANGE, RANGE_PSD_FLOOR, Measurement, NoiseConfig, OdometryInput,
                            RobotPose, bearing_range_jacobian, bearing_range_observation,
                            bearing_range_to_relative, relative_observation, unicycle_jacobians,
                            unicycle_propagate, wrap_angle)

angles = st.floats(-10, 10, allow_nan=False)
coords = st.floats(-50, 50, allow_nan=False)


def fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_unicycle_examples():
    p = unicycle_propagate(RobotPose(0.0, [0, 0]), OdometryInput(1.0, 0.0, 0.1))
    assert p.theta == 0.0 and np.allclose(p.position, [0.1, 0.0])
    p = unicycle_propagate(RobotPose(np.pi / 2, [0, 0]), OdometryInput(1.0, 0.0, 0.1))
    assert np.allclose(p.position, [0.0, 0.1])
    p0 = RobotPose(0.3, [1, 2])
    p = unicycle_propagate(p0, OdometryInput(0.0, 0.0, 0.1))
    assert p.theta == p0.theta and np.array_equal(p.position, p0.position)
    with pytest.raises(ValueError):
        OdometryInput(1.0, 0.0, 0.0)


@given(angles)
def test_wrap_range(a):
    w = float(wrap_angle(a))
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a)) and np.isclose(np.sin(w), np.sin(a))


def test_wrap_pi_is_positive():
    assert wrap_angle(np.pi) == np.pi
    assert wrap_angle(-np.pi) == np.pi


def test_relative_observation_examples():
    obs = RobotPose(0.0, [0, 0])
    assert np.allclose(relative_observation(obs, [1, 0]).value, [1, 0])
    assert np.allclose(relative_observation(RobotPose(np.pi / 2, [0, 0]), [1, 0]).value, [0, -1])
    assert np.allclose(relative_observation(obs, [0, 0], observer_id=1, target_id="L").value, [0, 0])


def test_bearing_range_examples():
    m = bearing_range_observation(RobotPose(0.0, [0, 0]), [1, 0])
    assert np.allclose(m.value, [0, 1])
    m = bearing_range_observation(RobotPose(0.0, [0, 0]), [0, 2])
    assert np.allclose(m.value, [np.pi / 2, 2])
    with pytest.raises(CoincidentPoints):
        bearing_range_observation(RobotPose(0.0, [1, 1]), [1, 1])
    m = bearing_range_observation(RobotPose(0.0, [0, 0]), [1, 0], noise=(0.0, -5.0))
    assert m.value[1] == 0.0


def test_bearing_range_conversion_examples():
    sp, sr = 0.02**2, 0.05**2
    m = Measurement(1, 2, BEARING_RANGE, [0.0, 1.0], np.diag([sp, sr]))
    c = bearing_range_to_relative(m)
    assert np.allclose(c.value, [1, 0])
    assert np.allclose(c.noise_cov, [[sr, 0], [0, sp]])
    c = bearing_range_to_relative(Measurement(1, 2, BEARING_RANGE, [np.pi / 2, 2.0], np.diag([sp, sr])))
    assert np.allclose(c.value, [0, 2])
    c = bearing_range_to_relative(Measurement(1, 2, BEARING_RANGE, [0.3, 0.0], np.diag([sp, sr])))
    assert np.allclose(c.value, 0)
    assert np.linalg.eigvalsh(c.noise_cov)[0] >= RANGE_PSD_FLOOR * 0.999


def test_measurement_validation():
    with pytest.raises(ValueError):
        Measurement(1, 1, "relative_xy", [0, 0], np.eye(2))
    with pytest.raises(ValueError):
        Measurement(1, 2, BEARING_RANGE, [0, -1], np.eye(2))
    with pytest.raises(ValueError):
        NoiseConfig(Q_w=-np.eye(2))


@settings(max_examples=1000)
@given(angles, coords, coords, coords, coords)
def test_bearing_range_round_trip(th, x, y, tx, ty):
    obs = RobotPose(th, [x, y])
    if np.hypot(tx - x, ty - y) < 0.01:
        return
    conv = bearing_range_to_relative(bearing_range_observation(obs, [tx, ty]))
    direct = relative_observation(obs, [tx, ty])
    assert np.allclose(conv.value, direct.value, atol=1e-9)
    assert -np.pi < bearing_range_observation(obs, [tx, ty]).value[0] <= np.pi


@given(angles, coords, coords, coords, coords)
def test_rotation_is_isometry(th, x, y, tx, ty):
    v = relative_observation(RobotPose(th, [x, y]), [tx, ty]).value
    assert abs(np.linalg.norm(v) - np.hypot(tx - x, ty - y)) <= 1e-12 * max(1.0, np.hypot(tx - x, ty - y))


@settings(max_examples=1000)
@given(st.floats(-np.pi, np.pi), st.floats(0.1, 10))
def test_bearing_range_jacobian_fd(phi, r):
    f = lambda q: q[1] * np.array([np.cos(q[0]), np.sin(q[0])])
    J = bearing_range_jacobian(phi, r)
    Jn = fd_jacobian(f, [phi, r])
    assert np.allclose(J, Jn, rtol=1e-5, atol=1e-5 * np.abs(J).max())


@settings(max_examples=300)
@given(angles, coords, coords, st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 2))
def test_unicycle_jacobians_fd(th, x, y, v, om, dt):
    q = np.array([th, x, y])
    u = OdometryInput(v, om, dt)
    F, G = unicycle_jacobians(q, u)

    def step(qq):
        return np.array([qq[0] + om * dt, qq[1] + v * dt * np.cos(qq[0]), qq[2] + v * dt * np.sin(qq[0])])

    def step_u(w):
        return unicycle_propagate(RobotPose(th, [x, y]), u, w).as_vector()

    assert np.allclose(F, fd_jacobian(step, q), atol=1e-5)
    Gn = fd_jacobian(step_u, [0.0, 0.0])
    Gn[0] = fd_jacobian(lambda w: np.array([th + (om + w[1]) * dt]), [0.0, 0.0])[0]
    assert np.allclose(G, Gn, atol=1e-5)
    new, F2, G2 = pose_step(q, v, om, dt)
    assert np.allclose(F2, F) and np.allclose(G2, G)
    assert np.allclose(new[1:], unicycle_propagate(RobotPose(th, [x, y]), u).position)


@settings(max_examples=300)
@given(angles, coords, coords, coords, coords)
def test_relative_measurement_jacobians_fd(th, x, y, tx, ty):
    q = np.array([th, x, y])
    pt = np.array([tx, ty])
    pred, H, Ct = relative_rows(q, pt[None])

    def h_obs(qq):
        return relative_observation(RobotPose(qq[0], qq[1:]), pt).value

    def h_tgt(p):
        return relative_observation(RobotPose(th, [x, y]), p).value

    assert np.allclose(pred[0], h_obs(q), atol=1e-12 * max(1, np.abs(pt).max()))
    scale = max(1.0, np.abs(H).max())
    assert np.allclose(H[0], fd_jacobian(h_obs, q), atol=1e-5 * scale)
    assert np.allclose(Ct, fd_jacobian(h_tgt, pt), atol=1e-5)
