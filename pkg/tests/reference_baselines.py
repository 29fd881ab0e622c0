"""Local-state baselines: LS-Cen, LS-CI, LS-SCI and LS-BDA.

Every robot tracks its own pose ``[theta, x, y]``.  The algorithms differ in
how a relative observation is fused and in which links it needs:

* LS-Cen keeps the exact joint covariance in factored form (own blocks,
  accumulated transition matrices and cross factors), so propagation is
  local and every update equals the centralized EKF.  A relative update
  needs all-to-all links.
* LS-CI updates the observer's pose with the target's estimate treated as
  arbitrarily correlated, written as an explicit 5-dim joint EKF per weight.
  One link, target to observer.
* LS-SCI turns the target's estimate and the measurement into an estimate of
  the observer's position and fuses it with split covariance intersection.
* LS-BDA keeps per-pair cross-correlation factors and updates the observing
  pair jointly; other cross terms follow the block-diagonal approximation.
  Two links, one in each direction.

Landmark updates never need communication.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from cicoloc.estimation import kalman_update, symmetrize
from cicoloc.models import (
    J_ROT,
    Measurement,
    NoiseConfig,
    OdometryInput,
    bearing_range_to_relative,
    rotation,
    unicycle_jacobians,
    wrap_angle,
)
from cicoloc.team import TeamFilter, handshake_ok

POS = slice(1, 3)


@dataclass(eq=False)
class LocalState:
    robot_id: int
    mean: np.ndarray
    cov: np.ndarray
    aux: dict[str, Any] = field(default_factory=dict)


def _pose_step(x: np.ndarray, u: OdometryInput) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    F, G = unicycle_jacobians(x, u)
    c, s = np.cos(x[0]), np.sin(x[0])
    new = np.array([wrap_angle(x[0] + u.omega * u.dt), x[1] + u.v * u.dt * c, x[2] + u.v * u.dt * s])
    return new, F, G


def _relative_rows(x_obs: np.ndarray, p_target: np.ndarray):
    """Predicted relative measurement and its Jacobians w.r.t. observer pose and target position."""
    Ct = rotation(x_obs[0]).T
    d = p_target - x_obs[1:3]
    H_obs = np.empty((2, 3))
    H_obs[:, 0] = Ct @ J_ROT @ d
    H_obs[:, 1:3] = -Ct
    return Ct @ d, H_obs, Ct


def _as_relative(m: Measurement) -> Measurement:
    return bearing_range_to_relative(m)


def _split_batch(batch, landmarks):
    lm, rel = [], []
    for m in batch:
        m = _as_relative(m)
        if isinstance(m.target, str):
            if m.target not in landmarks:
                raise KeyError(m.target)
            lm.append(m)
        else:
            rel.append(m)
    return lm, rel


def _landmark_update(x, P, ms, landmarks):
    """Stacked pose EKF update from landmark measurements."""
    k = len(ms)
    H = np.zeros((2 * k, 3))
    r = np.empty(2 * k)
    R = np.zeros((2 * k, 2 * k))
    for n, m in enumerate(ms):
        rows = slice(2 * n, 2 * n + 2)
        pred, H[rows], _ = _relative_rows(x, np.asarray(landmarks[m.target], dtype=float))
        r[rows] = m.value - pred
        R[rows, rows] = m.noise_cov
    x, P = kalman_update(x, P, H, R, r)
    x[0] = wrap_angle(x[0])
    return x, P, H, R


def _init_arrays(init_poses, init_pos_var, init_theta_var):
    x = np.array([p.as_vector() for p in init_poses], dtype=float)
    P = np.tile(np.diag([init_theta_var, init_pos_var, init_pos_var]), (len(init_poses), 1, 1))
    return x, P


def _pseudo_position(x_obs, p_target, m):
    """Observer position implied by a relative measurement and the target position.

    Returns the estimate, the rotated measurement noise and the direction
    along which the observer's heading error moves it.
    """
    C = rotation(x_obs[0])
    co = C @ m.value
    return p_target - co, C @ m.noise_cov @ C.T, C @ (J_ROT.T @ m.value)


class _LocalTeam(TeamFilter):
    def __init__(self, n_robots, landmarks, noise: NoiseConfig, init_poses, init_pos_var=1e-4,
                 init_theta_var=1e-4):
        super().__init__(n_robots, landmarks)
        self.noise = noise
        self.x, self.P = _init_arrays(init_poses, init_pos_var, init_theta_var)

    def _passes(self, observer, target, links):
        return handshake_ok(self.name, observer, int(target), self.n, links)

    def position_estimates(self):
        return self.x[:, 1:3].copy(), self.P[:, 1:3, 1:3].copy()

    def local_states(self) -> list[LocalState]:
        return [LocalState(i + 1, self.x[i].copy(), self.P[i].copy()) for i in range(self.n)]


# --- LS-Cen ------------------------------------------------------------------------------

class LSCenTeam(_LocalTeam):
    """Centralized-equivalent EKF with local propagation.

    The joint cross covariance between robots i and j is
    ``Phi_i @ sigma_ij @ Phi_j.T`` where ``Phi_i`` accumulates robot i's
    transition Jacobians since the last update.  Any update materializes the
    joint covariance, applies the EKF and resets the factors.
    """

    name = "LS-Cen"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.Phi = np.tile(np.eye(3), (self.n, 1, 1))
        self.sigma = np.zeros((self.n, self.n, 3, 3))

    def propagate(self, inputs):
        Q = self.noise.Q_w
        for i, u in enumerate(inputs):
            self.x[i], F, G = _pose_step(self.x[i], u)
            self.P[i] = symmetrize(F @ self.P[i] @ F.T + G @ Q @ G.T)
            self.Phi[i] = F @ self.Phi[i]

    def joint(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        P = np.zeros((3 * n, 3 * n))
        for i in range(n):
            P[3 * i:3 * i + 3, 3 * i:3 * i + 3] = self.P[i]
            for j in range(i + 1, n):
                c = self.Phi[i] @ self.sigma[i, j] @ self.Phi[j].T
                P[3 * i:3 * i + 3, 3 * j:3 * j + 3] = c
                P[3 * j:3 * j + 3, 3 * i:3 * i + 3] = c.T
        return self.x.reshape(-1).copy(), P

    def _store(self, x, P):
        n = self.n
        self.x = x.reshape(n, 3)
        self.x[:, 0] = wrap_angle(self.x[:, 0])
        for i in range(n):
            self.P[i] = P[3 * i:3 * i + 3, 3 * i:3 * i + 3]
            self.Phi[i] = np.eye(3)
            for j in range(i + 1, n):
                self.sigma[i, j] = P[3 * i:3 * i + 3, 3 * j:3 * j + 3]

    def observe(self, batches, links=frozenset()):
        for a in range(1, self.n + 1):
            ms = [_as_relative(m) for m in batches.get(a, ())]
            ms = [m for m in ms if isinstance(m.target, str) or self._passes(a, m.target, links)]
            if not ms:
                continue
            x, P = self.joint()
            H, r, R = joint_relative_system(x, a, ms, self.landmarks)
            x, P = kalman_update(x, P, H, R, r)
            self._store(x, P)

    def local_states(self):
        x, P = self.joint()
        return [LocalState(i + 1, self.x[i].copy(), self.P[i].copy(),
                           {"joint_mean": x, "joint_cov": P}) for i in range(self.n)]


def joint_relative_system(x: np.ndarray, observer: int, ms: Sequence[Measurement],
                          landmarks: Mapping) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked Jacobian, residual and noise of one robot's measurements on the joint pose vector."""
    a = observer - 1
    xa = x[3 * a:3 * a + 3]
    k = len(ms)
    H = np.zeros((2 * k, x.size))
    r = np.empty(2 * k)
    R = np.zeros((2 * k, 2 * k))
    for n, m in enumerate(ms):
        rows = slice(2 * n, 2 * n + 2)
        if isinstance(m.target, str):
            pt = np.asarray(landmarks[m.target], dtype=float)
            pred, Ha, _ = _relative_rows(xa, pt)
        else:
            b = int(m.target) - 1
            pred, Ha, Ct = _relative_rows(xa, x[3 * b + 1:3 * b + 3])
            H[rows, 3 * b + 1:3 * b + 3] = Ct
        H[rows, 3 * a:3 * a + 3] = Ha
        r[rows] = m.value - pred
        R[rows, rows] = m.noise_cov
    return H, r, R


# --- LS-CI -------------------------------------------------------------------------------

class LSCITeam(_LocalTeam):
    """Pose EKF per robot; relative observations fused by CI with min-trace weights."""

    name = "LS-CI"

    def propagate(self, inputs):
        Q = self.noise.Q_w
        for i, u in enumerate(inputs):
            self.x[i], F, G = _pose_step(self.x[i], u)
            self.P[i] = symmetrize(F @ self.P[i] @ F.T + G @ Q @ G.T)

    def observe(self, batches, links=frozenset()):
        sx, sP = self.x.copy(), self.P.copy()
        for a in range(1, self.n + 1):
            lm, rel = _split_batch(batches.get(a, ()), self.landmarks)
            i = a - 1
            if lm:
                self.x[i], self.P[i], _, _ = _landmark_update(self.x[i], self.P[i], lm, self.landmarks)
            for m in rel:
                if not self._passes(a, m.target, links):
                    continue
                b = int(m.target) - 1
                self.x[i], self.P[i] = ci_relative_update(self.x[i], self.P[i], sx[b, 1:3],
                                                          sP[b, 1:3, 1:3], m)


def ci_relative_update(x, P, p_target, P_target, m, grid=np.linspace(0.02, 0.98, 49)):
    """Joint-form EKF update of (own pose, target position) with the CI prior
    diag(P / w, P_target / (1 - w)); keeps the own block of the best weight."""
    z = _as_relative(m).value
    R = _as_relative(m).noise_cov
    c, s = np.cos(x[0]), np.sin(x[0])
    Ct = np.array([[c, s], [-s, c]])
    d = p_target - x[1:3]
    Hj = np.zeros((2, 5))
    Hj[:, 0] = np.array([[-s, c], [-c, -s]]) @ d
    Hj[:, 1:3] = -Ct
    Hj[:, 3:5] = Ct
    best = (np.trace(P), x, P)
    for w in grid:
        Pj = np.zeros((5, 5))
        Pj[:3, :3] = P / w
        Pj[3:, 3:] = P_target / (1.0 - w)
        S = Hj @ Pj @ Hj.T + R
        K = Pj @ Hj.T @ np.linalg.inv(S)
        Pn = (np.eye(5) - K @ Hj) @ Pj
        if np.trace(Pn[:3, :3]) < best[0]:
            xn = x + (K @ (z - Ct @ d))[:3]
            best = (np.trace(Pn[:3, :3]), xn, symmetrize(Pn[:3, :3]))
    _, mean, cov = best
    mean = mean.copy()
    mean[0] = wrap_angle(mean[0])
    return mean, cov


# --- LS-SCI ------------------------------------------------------------------------------

SCI_GRID = np.linspace(0.01, 0.99, 99)


class LSSCITeam(_LocalTeam):
    """Split covariance intersection.

    Each robot keeps ``P = P_ind + P_dep``.  The split starts fully
    independent; process and measurement noise go to the independent part,
    and the dependent part grows only through relative fusions.
    """

    name = "LS-SCI"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.P_ind = self.P.copy()
        self.P_dep = np.zeros_like(self.P)

    def propagate(self, inputs):
        Q = self.noise.Q_w
        for i, u in enumerate(inputs):
            self.x[i], F, G = _pose_step(self.x[i], u)
            self.P_ind[i] = symmetrize(F @ self.P_ind[i] @ F.T + G @ Q @ G.T)
            self.P_dep[i] = symmetrize(F @ self.P_dep[i] @ F.T)
        self.P = self.P_ind + self.P_dep

    def observe(self, batches, links=frozenset()):
        sx, s_ind, s_dep = self.x.copy(), self.P_ind.copy(), self.P_dep.copy()
        for a in range(1, self.n + 1):
            lm, rel = _split_batch(batches.get(a, ()), self.landmarks)
            i = a - 1
            if lm:
                self._landmark(i, lm)
            for m in rel:
                if not self._passes(a, m.target, links):
                    continue
                b = int(m.target) - 1
                p_hat, R_rot, g = _pseudo_position(self.x[i], sx[b, 1:3], m)
                ind2 = s_ind[b, 1:3, 1:3] + R_rot
                dep2 = s_dep[b, 1:3, 1:3] + self.P[i][0, 0] * np.outer(g, g)
                self.x[i], self.P_ind[i], self.P_dep[i] = sci_update(
                    self.x[i], self.P_ind[i], self.P_dep[i], p_hat, ind2, dep2)
                self.P[i] = self.P_ind[i] + self.P_dep[i]

    def _landmark(self, i, lm):
        x, P, H, R = _landmark_update(self.x[i], self.P[i], lm, self.landmarks)
        # recover the gain to push the split through the Joseph form
        S = H @ self.P[i] @ H.T + R
        K = np.linalg.solve(S, H @ self.P[i]).T
        A = np.eye(3) - K @ H
        self.P_ind[i] = symmetrize(A @ self.P_ind[i] @ A.T + K @ R @ K.T)
        self.P_dep[i] = symmetrize(A @ self.P_dep[i] @ A.T)
        self.x[i] = x
        self.P[i] = self.P_ind[i] + self.P_dep[i]

    def local_states(self):
        return [LocalState(i + 1, self.x[i].copy(), self.P[i].copy(),
                           {"P_ind": self.P_ind[i].copy(), "P_dep": self.P_dep[i].copy()})
                for i in range(self.n)]


def sci_update(x, P_ind, P_dep, z, Z_ind, Z_dep, grid=SCI_GRID):
    """Split CI of a pose estimate with a position estimate ``z``.

    Inflated covariances ``P_dep / w + P_ind`` and ``Z_dep / (1 - w) + Z_ind``
    are combined in Kalman form; ``w`` minimizes the fused trace over ``grid``.
    With both dependent parts zero this is the ordinary Kalman update.
    """
    w = grid[:, None, None]
    P1 = P_dep[None] / w + P_ind[None]
    P2 = Z_dep[None] / (1.0 - w) + Z_ind[None]
    S = P1[:, 1:3, 1:3] + P2
    det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
    Sinv = np.empty_like(S)
    Sinv[:, 0, 0] = S[:, 1, 1] / det
    Sinv[:, 1, 1] = S[:, 0, 0] / det
    Sinv[:, 0, 1] = -S[:, 0, 1] / det
    Sinv[:, 1, 0] = -S[:, 1, 0] / det
    K = P1[:, :, 1:3] @ Sinv
    fused = P1 - K @ P1[:, 1:3, :]
    k = int(np.argmin(np.trace(fused, axis1=1, axis2=2)))
    K = K[k]
    A = np.eye(3)
    A[:, 1:3] -= K
    new_x = x + K @ (z - x[1:3])
    new_x[0] = wrap_angle(new_x[0])
    new_P = symmetrize(fused[k])
    new_ind = symmetrize(A @ P_ind @ A.T + K @ Z_ind @ K.T)
    return new_x, new_ind, symmetrize(new_P - new_ind)


# --- LS-BDA ------------------------------------------------------------------------------

class LSBDATeam(_LocalTeam):
    """Block-diagonal approximation with stored cross-correlation factors.

    The cross covariance of robots i and j is ``sigma[i, j] @ sigma[j, i].T``.
    After a joint update of the observing pair, each robot rescales its
    factors towards third robots by ``P_new @ inv(P_old)``.
    """

    name = "LS-BDA"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.sigma = np.zeros((self.n, self.n, 3, 3))

    def propagate(self, inputs):
        Q = self.noise.Q_w
        for i, u in enumerate(inputs):
            self.x[i], F, G = _pose_step(self.x[i], u)
            self.P[i] = symmetrize(F @ self.P[i] @ F.T + G @ Q @ G.T)
            self.sigma[i] = F @ self.sigma[i]

    def _rescale(self, i, P_old, skip=()):
        M = np.linalg.solve(P_old.T, self.P[i].T).T
        for k in range(self.n):
            if k != i and k not in skip:
                self.sigma[i, k] = M @ self.sigma[i, k]

    def observe(self, batches, links=frozenset()):
        for a in range(1, self.n + 1):
            lm, rel = _split_batch(batches.get(a, ()), self.landmarks)
            i = a - 1
            if lm:
                P_old = self.P[i].copy()
                self.x[i], self.P[i], _, _ = _landmark_update(self.x[i], self.P[i], lm, self.landmarks)
                self._rescale(i, P_old)
            for m in rel:
                if self._passes(a, m.target, links):
                    self._pair_update(i, int(m.target) - 1, m)

    def _pair_update(self, i, j, m):
        x = np.r_[self.x[i], self.x[j]]
        P = np.zeros((6, 6))
        P[:3, :3] = self.P[i]
        P[3:, 3:] = self.P[j]
        P[:3, 3:] = self.sigma[i, j] @ self.sigma[j, i].T
        P[3:, :3] = P[:3, 3:].T
        pred, Ha, Ct = _relative_rows(self.x[i], self.x[j, 1:3])
        H = np.zeros((2, 6))
        H[:, :3] = Ha
        H[:, 4:6] = Ct
        x, P = kalman_update(x, P, H, m.noise_cov, m.value - pred)
        Pi_old, Pj_old = self.P[i].copy(), self.P[j].copy()
        self.x[i], self.x[j] = x[:3], x[3:]
        self.x[i, 0] = wrap_angle(self.x[i, 0])
        self.x[j, 0] = wrap_angle(self.x[j, 0])
        self.P[i], self.P[j] = P[:3, :3], P[3:, 3:]
        self._rescale(i, Pi_old, skip=(j,))
        self._rescale(j, Pj_old, skip=(i,))
        self.sigma[i, j] = P[:3, 3:]
        self.sigma[j, i] = np.eye(3)

    def local_states(self):
        return [LocalState(i + 1, self.x[i].copy(), self.P[i].copy(),
                           {"sigma": self.sigma[i].copy()}) for i in range(self.n)]


# --- functional wrappers -----------------------------------------------------------------

def _step(team: TeamFilter, inputs, observations, comm_ok):
    team.step(inputs, observations, frozenset(comm_ok))
    return team


def ls_cen_step(team: LSCenTeam, inputs, observations, comm_ok) -> LSCenTeam:
    return _step(team, inputs, observations, comm_ok)


def ls_ci_step(team: LSCITeam, inputs, observations, comm_ok) -> LSCITeam:
    return _step(team, inputs, observations, comm_ok)


def ls_sci_step(team: LSSCITeam, inputs, observations, comm_ok) -> LSSCITeam:
    return _step(team, inputs, observations, comm_ok)


def ls_bda_step(team: LSBDATeam, inputs, observations, comm_ok) -> LSBDATeam:
    return _step(team, inputs, observations, comm_ok)
