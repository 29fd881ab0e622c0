"""Unicycle motion and planar observation models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import CoincidentPoints

RELATIVE_XY = "relative_xy"
BEARING_RANGE = "bearing_range"

RANGE_PSD_FLOOR = 1e-9

TargetId = Union[int, str]


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


# d/dtheta C(theta)^T = C(theta)^T @ J
J_ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _psd_matrix(m, name):
    m = np.asarray(m, dtype=float)
    if m.shape != (2, 2):
        raise ValueError(f"{name} must be 2x2, got {m.shape}")
    if not np.allclose(m, m.T, atol=1e-12) or np.linalg.eigvalsh(m)[0] < -1e-12:
        raise ValueError(f"{name} must be symmetric PSD")
    return m


@dataclass(frozen=True, eq=False)
class RobotPose:
    theta: float
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", float(wrap_angle(float(self.theta))))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))

    @property
    def x(self) -> float:
        return float(self.position[0])

    @property
    def y(self) -> float:
        return float(self.position[1])

    def as_vector(self) -> np.ndarray:
        """Pose as [theta, x, y]."""
        return np.array([self.theta, self.position[0], self.position[1]])

    @classmethod
    def from_vector(cls, q) -> "RobotPose":
        return cls(q[0], q[1:3])


@dataclass(frozen=True)
class OdometryInput:
    v: float
    omega: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    """Noise parameters for motion and observation.

    ``Q_w`` is the covariance of the own odometry noise over (v, omega).
    ``sigma_u_sq`` is the assumed variance of another robot's unknown speed,
    ``u_max`` the speed bound and ``sigma_theta_sq`` the orientation-variance
    bound used by the position-only analysis.
    """

    Q_w: np.ndarray = field(default_factory=lambda: np.diag([0.01**2, 0.01**2]))
    sigma_u_sq: float = 0.0027
    u_max: float = 0.09
    sigma_theta_sq: float = 1e-4
    R_landmark: np.ndarray = field(default_factory=lambda: 0.05**2 * np.eye(2))
    R_relative: np.ndarray = field(default_factory=lambda: 0.05**2 * np.eye(2))
    R_bearing_range: np.ndarray = field(default_factory=lambda: np.diag([0.02**2, 0.05**2]))

    def __post_init__(self):
        for name in ("Q_w", "R_landmark", "R_relative", "R_bearing_range"):
            object.__setattr__(self, name, _psd_matrix(getattr(self, name), name))
        for name in ("sigma_u_sq", "u_max", "sigma_theta_sq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def analysis_increment(self, dt: float) -> float:
        """Per-step position variance growth for another robot, orientation given."""
        return dt**2 * max(self.sigma_u_sq, self.u_max**2 * self.sigma_theta_sq)

    def replay_increment(self, dt: float) -> float:
        return dt**2 * self.sigma_u_sq


@dataclass(frozen=True, eq=False)
class Measurement:
    observer: int
    target: TargetId
    kind: str
    value: np.ndarray
    noise_cov: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.observer == self.target:
            raise ValueError("a robot cannot observe itself")
        if self.kind not in (RELATIVE_XY, BEARING_RANGE):
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        value = np.asarray(self.value, dtype=float).reshape(2)
        if self.kind == BEARING_RANGE and value[1] < 0:
            raise ValueError("negative range")
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "noise_cov", np.asarray(self.noise_cov, dtype=float).reshape(2, 2))


# --- motion -------------------------------------------------------------------

def unicycle_propagate(pose: RobotPose, u: OdometryInput, w=(0.0, 0.0)) -> RobotPose:
    v = u.v + w[0]
    om = u.omega + w[1]
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    pos = pose.position + v * u.dt * np.array([c, s])
    return RobotPose(pose.theta + om * u.dt, pos)


def unicycle_jacobians(q: np.ndarray, u: OdometryInput) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the unicycle step w.r.t. the pose [theta, x, y] and input (v, omega)."""
    c, s = np.cos(q[0]), np.sin(q[0])
    dt = u.dt
    F = np.array([[1.0, 0.0, 0.0],
                  [-u.v * dt * s, 1.0, 0.0],
                  [u.v * dt * c, 0.0, 1.0]])
    G = np.array([[0.0, dt],
                  [dt * c, 0.0],
                  [dt * s, 0.0]])
    return F, G


# --- observation --------------------------------------------------------------

def relative_observation(observer: RobotPose, target_position, noise=(0.0, 0.0), *,
                         observer_id: int = 1, target_id: TargetId = 2,
                         noise_cov=None, time: float = 0.0) -> Measurement:
    d = np.asarray(target_position, dtype=float) - observer.position
    value = rotation(observer.theta).T @ d + np.asarray(noise, dtype=float)
    if noise_cov is None:
        noise_cov = np.zeros((2, 2))
    return Measurement(observer_id, target_id, RELATIVE_XY, value, noise_cov, time)


def bearing_range_observation(observer: RobotPose, target_position, noise=(0.0, 0.0), *,
                              observer_id: int = 1, target_id: TargetId = 2,
                              noise_cov=None, time: float = 0.0) -> Measurement:
    d = np.asarray(target_position, dtype=float) - observer.position
    r = float(np.hypot(d[0], d[1]))
    if r < 1e-9:
        raise CoincidentPoints("observer and target coincide")
    phi = wrap_angle(np.arctan2(d[1], d[0]) - observer.theta + noise[0])
    rng = max(r + noise[1], 0.0)
    if noise_cov is None:
        noise_cov = np.zeros((2, 2))
    return Measurement(observer_id, target_id, BEARING_RANGE, [phi, rng], noise_cov, time)


def bearing_range_jacobian(phi: float, r: float) -> np.ndarray:
    """d(r cos phi, r sin phi) / d(phi, r)."""
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[-r * s, c],
                     [r * c, s]])


def bearing_range_to_relative(m: Measurement) -> Measurement:
    if m.kind == RELATIVE_XY:
        return m
    phi, r = m.value
    value = r * np.array([np.cos(phi), np.sin(phi)])
    J = bearing_range_jacobian(phi, r)
    cov = J @ m.noise_cov @ J.T
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov)[0] < RANGE_PSD_FLOOR:
        cov = cov + RANGE_PSD_FLOOR * np.eye(2)
    return Measurement(m.observer, m.target, RELATIVE_XY, value, cov, m.time)
