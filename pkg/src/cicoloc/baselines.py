"""Local-state baselines: LS-Cen, LS-CI, LS-SCI and LS-BDA.

Every robot tracks its own pose ``[theta, x, y]``.  The algorithms differ in
how a relative observation is fused and in which links it needs:

* LS-Cen keeps the exact joint covariance in factored form (own blocks,
  accumulated transition matrices and cross factors), so propagation is
  local and every update equals the centralized EKF.  A relative update
  needs all-to-all links.
* LS-CI updates the observer's pose with the target's estimate treated as
  arbitrarily correlated (CI-inflated joint prior).  One link, target to observer.
* LS-SCI turns the target's estimate and the measurement into an estimate of
  the observer's position and fuses it by split covariance intersection.
* LS-BDA keeps per-pair cross-correlation factors and updates the observing
  pair jointly; other cross terms follow the block-diagonal approximation.
  Two links, one in each direction.

Landmark updates never need communication.  All teams carry a leading run
axis like the other team filters (``x`` is (B, N, 3), ``P`` is (B, N, 3, 3)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .estimation import kalman_update, symmetrize
from .models import J_ROT, NoiseConfig, RobotPose, wrap_angle
from .team import TeamFilter, handshake_mask

POS = slice(1, 3)


@dataclass(eq=False)
class LocalState:
    robot_id: int
    mean: np.ndarray
    cov: np.ndarray
    aux: dict[str, Any] = field(default_factory=dict)


def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _T(a):
    return np.swapaxes(a, -1, -2)


def pose_step(x, v, omega, dt):
    """Unicycle step and its Jacobians for stacked poses ``x`` (..., 3)."""
    c, s = np.cos(x[..., 0]), np.sin(x[..., 0])
    new = np.stack([wrap_angle(x[..., 0] + omega * dt), x[..., 1] + v * dt * c,
                    x[..., 2] + v * dt * s], -1)
    F = np.broadcast_to(np.eye(3), x.shape + (3,)).copy()
    F[..., 1, 0] = -v * dt * s
    F[..., 2, 0] = v * dt * c
    G = np.zeros(x.shape[:-1] + (3, 2))
    G[..., 0, 1] = dt
    G[..., 1, 0] = dt * c
    G[..., 2, 0] = dt * s
    return new, F, G


def relative_rows(x_obs, p_target):
    """Predicted relative measurements and Jacobians.

    ``x_obs`` (..., 3), ``p_target`` (..., S, 2).  Returns the prediction
    (..., S, 2), the Jacobian w.r.t. the observer pose (..., S, 2, 3) and the
    rotation (..., 2, 2) that is the Jacobian w.r.t. the target position.
    """
    Ct = _T(_rot(x_obs[..., 0]))
    d = p_target - x_obs[..., None, 1:3]
    pred = np.einsum("...xy,...sy->...sx", Ct, d)
    H = np.empty(d.shape + (3,))
    H[..., 0] = np.einsum("...xy,...sy->...sx", Ct @ J_ROT, d)
    H[..., 1:3] = -Ct[..., None, :, :]
    return pred, H, Ct


def _stack_rows(H, resid, R, mask):
    """Flatten slot rows into one masked system; unused slots get zero rows and unit noise."""
    m = mask[..., None]
    S = mask.shape[-1]
    H = (H * m[..., None]).reshape(mask.shape[:-1] + (2 * S, H.shape[-1]))
    resid = np.where(m, resid, 0.0).reshape(mask.shape[:-1] + (2 * S,))
    Rm = np.where(m[..., None], np.broadcast_to(R, mask.shape + (2, 2)), np.eye(2))
    Rb = np.einsum("...sxy,st->...sxty", Rm, np.eye(S)).reshape(mask.shape[:-1] + (2 * S, 2 * S))
    return H, resid, Rb


def kalman_gain(P, H, R):
    S = symmetrize(H @ P @ _T(H) + R)
    return _T(np.linalg.solve(S, H @ P))


def pseudo_position(x_obs, p_target, z, R):
    """Observer position implied by a relative measurement and the target position.

    Returns the estimate, the rotated measurement noise and the direction
    along which the observer's heading error moves it.
    """
    C = _rot(x_obs[..., 0])
    co = (C @ z[..., None])[..., 0]
    g = (C @ (J_ROT.T @ z[..., None]))[..., 0]
    return p_target - co, C @ R @ _T(C), g


CI_GRID = np.linspace(0.02, 0.98, 49)


def _trace_inv2(S, M):
    """tr(S^-1 M) for stacks of 2x2 matrices."""
    det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
    num = (S[..., 1, 1] * M[..., 0, 0] - S[..., 0, 1] * M[..., 1, 0]
           - S[..., 1, 0] * M[..., 0, 1] + S[..., 0, 0] * M[..., 1, 1])
    return num / det


def ci_relative_update(x, P, p_target, P_target, z, R, grid=CI_GRID):
    """EKF update of pose estimates with a relative measurement of a target whose
    position estimate has unknown correlation with the observer's.

    The joint prior of (own pose, target position) is bounded by the CI form
    diag(P / w, P_target / (1 - w)), valid for any cross-covariance; the
    measurement noise ``R`` is independent and enters as usual.  ``w`` is the
    grid value giving the smallest updated trace, or no update when that is
    smaller still.  All arguments may carry matching leading axes.
    """
    pred, H, Ct = relative_rows(x, p_target[..., None, :])
    H, pred = H[..., 0, :, :], pred[..., 0, :]
    A = symmetrize(H @ P @ _T(H))
    Bt = symmetrize(Ct @ P_target @ _T(Ct))
    M = H @ P @ P @ _T(H)
    w = grid[:, None, None]
    S = A[..., None, :, :] / w + Bt[..., None, :, :] / (1.0 - w) + R[..., None, :, :]
    tr = np.trace(P, axis1=-2, axis2=-1)[..., None]
    cost = tr / grid - _trace_inv2(S, M[..., None, :, :]) / grid**2
    k = np.argmin(cost, axis=-1)
    wk = grid[k][..., None, None]
    skip = np.take_along_axis(cost, k[..., None], axis=-1)[..., 0] >= tr[..., 0]
    Pw = P / wk
    Sk = symmetrize(H @ Pw @ _T(H) + Bt / (1.0 - wk) + R)
    K = _T(np.linalg.solve(Sk, H @ Pw))
    r = z - pred
    mean = x + (K @ r[..., None])[..., 0]
    IKH = np.eye(3) - K @ H
    cov = symmetrize(IKH @ Pw @ _T(IKH) + K @ (Sk - H @ Pw @ _T(H)) @ _T(K))
    mean[..., 0] = wrap_angle(mean[..., 0])
    mean = np.where(skip[..., None], x, mean)
    cov = np.where(skip[..., None, None], P, cov)
    return mean, cov


SCI_GRID = np.linspace(0.01, 0.99, 99)


def sci_update(x, P_ind, P_dep, z, Z_ind, Z_dep, grid=SCI_GRID):
    """Split CI of pose estimates with position estimates ``z``.

    Inflated covariances ``P_dep / w + P_ind`` and ``Z_dep / (1 - w) + Z_ind``
    are combined in Kalman form; ``w`` minimizes the fused trace over ``grid``.
    With both dependent parts zero this is the ordinary Kalman update.
    """
    # trace of the fused covariance for every grid weight, from 2x2 blocks only:
    # tr(P1) - tr(S^-1 M^T M) with M = P1[:, pos], S = P1[pos, pos] + P2.
    # M = a / w + b, so M^T M is a quadratic in 1/w with 2x2 coefficients.
    iw, iv = 1.0 / grid, 1.0 / (1.0 - grid)
    a, b = P_dep[..., :, 1:3], P_ind[..., :, 1:3]
    aa, bb = _T(a) @ a, _T(b) @ b
    ab = _T(a) @ b
    ab = ab + _T(ab)
    c = b[..., 1:3, :] + Z_ind

    def entry(x, y):
        g = (aa[..., x, y, None] * iw + ab[..., x, y, None]) * iw + bb[..., x, y, None]
        s_ = a[..., 1 + x, y, None] * iw + Z_dep[..., x, y, None] * iv + c[..., x, y, None]
        return g, s_

    (g00, s00), (g01, s01), (g11, s11) = entry(0, 0), entry(0, 1), entry(1, 1)
    red = (s11 * g00 - 2.0 * s01 * g01 + s00 * g11) / (s00 * s11 - s01 * s01)
    tr1 = (np.trace(P_dep, axis1=-2, axis2=-1)[..., None] * iw
           + np.trace(P_ind, axis1=-2, axis2=-1)[..., None])
    w = grid
    k = np.argmin(tr1 - red, axis=-1)
    wk = w[k][..., None, None]
    P1 = P_dep / wk + P_ind
    P2 = Z_dep / (1.0 - wk) + Z_ind
    K = _T(np.linalg.solve(P1[..., 1:3, 1:3] + P2, P1[..., 1:3, :]))
    fused = P1 - K @ P1[..., 1:3, :]
    A = np.broadcast_to(np.eye(3), fused.shape).copy()
    A[..., :, 1:3] -= K
    new_x = x + (K @ (z - x[..., 1:3])[..., None])[..., 0]
    new_x[..., 0] = wrap_angle(new_x[..., 0])
    new_P = symmetrize(fused)
    new_ind = symmetrize(A @ P_ind @ _T(A) + K @ Z_ind @ _T(K))
    return new_x, new_ind, symmetrize(new_P - new_ind)


def _as_runs(init_poses):
    if init_poses and isinstance(init_poses[0], RobotPose):
        return [list(init_poses)]
    return [list(p) for p in init_poses]


class _LocalTeam(TeamFilter):
    def __init__(self, n_robots, landmarks, noise: NoiseConfig, init_poses, init_pos_var=1e-4,
                 init_theta_var=1e-4):
        runs = _as_runs(init_poses)
        super().__init__(n_robots, landmarks, len(runs))
        self.noise = noise
        self.x = np.array([[p.as_vector() for p in poses] for poses in runs], dtype=float)
        self.P = np.broadcast_to(np.diag([init_theta_var, init_pos_var, init_pos_var]),
                                 (self.B, n_robots, 3, 3)).copy()
        lay = self.layout
        self._ar = np.arange(n_robots)
        self._rel_target = lay.target_robot[:, :lay.n_rel]

    def position_estimates(self):
        return self.x[..., 1:3].copy(), self.P[..., 1:3, 1:3].copy()

    def local_states(self, run: int = 0) -> list[LocalState]:
        return [LocalState(i + 1, self.x[run, i].copy(), self.P[run, i].copy()) for i in range(self.n)]

    def _propagate_pose(self, v, omega, dt):
        self.x, F, G = pose_step(self.x, v, omega, dt)
        self.P = symmetrize(F @ self.P @ _T(F) + G @ self.noise.Q_w @ _T(G))
        return F

    def _relative_mask(self, mask, links):
        """Relative slots (B, N, N-1) that are measured and whose links were delivered."""
        hs = handshake_mask(self.name, np.asarray(links, dtype=bool))
        return mask[..., :self.layout.n_rel] & hs[:, self._ar[:, None], self._rel_target]

    def _landmark_system(self, x, z, mask, R):
        """Masked stacked landmark system for poses ``x`` (..., 3); slot arrays restricted to landmarks."""
        lay = self.layout
        pred, H, _ = relative_rows(x, np.broadcast_to(lay.landmark_pos, x.shape[:-1] + lay.landmark_pos.shape))
        return _stack_rows(H, z - pred, R, mask)

    def _slots(self, z, mask, R):
        n_rel = self.layout.n_rel
        R = np.broadcast_to(R, mask.shape + (2, 2))
        return (z[..., n_rel:, :], mask[..., n_rel:], R[..., n_rel:, :, :],
                z[..., :n_rel, :], R[..., :n_rel, :, :])


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
        self.Phi = np.broadcast_to(np.eye(3), (self.B, self.n, 3, 3)).copy()
        self.sigma = np.zeros((self.B, self.n, self.n, 3, 3))

    def propagate_arrays(self, v, omega, dt):
        F = self._propagate_pose(v, omega, dt)
        self.Phi = F @ self.Phi

    def joint(self) -> tuple[np.ndarray, np.ndarray]:
        B, n = self.B, self.n
        blocks = np.einsum("biwx,bijxy,bjzy->bijwz", self.Phi, self.sigma, self.Phi)
        blocks[:, self._ar, self._ar] = self.P
        P = blocks.transpose(0, 1, 3, 2, 4).reshape(B, 3 * n, 3 * n)
        return self.x.reshape(B, -1).copy(), P

    def _store(self, x, P, where):
        B, n = self.B, self.n
        x = x.reshape(B, n, 3)
        x[..., 0] = wrap_angle(x[..., 0])
        blocks = P.reshape(B, n, 3, n, 3).transpose(0, 1, 3, 2, 4)
        w = where[:, None, None]
        self.x = np.where(w, x, self.x)
        self.P = np.where(w[..., None], blocks[:, self._ar, self._ar], self.P)
        self.Phi = np.where(w[..., None], np.eye(3), self.Phi)
        self.sigma = np.where(w[..., None, None], blocks, self.sigma)

    def observe_arrays(self, z, mask, R, links):
        lay = self.layout
        n, n_rel = self.n, lay.n_rel
        mask = mask.copy()
        mask[..., :n_rel] = self._relative_mask(mask, links)
        R = np.broadcast_to(R, mask.shape + (2, 2))
        for a in range(n):
            m = mask[:, a]
            active = np.any(m, axis=-1)
            if not np.any(active):
                continue
            x, P = self.joint()
            xa = self.x[:, a]
            tp = np.empty((self.B, lay.n_slots, 2))
            tp[:, :n_rel] = self.x[:, self._rel_target[a], 1:3]
            tp[:, n_rel:] = lay.landmark_pos
            pred, Ha, Ct = relative_rows(xa, tp)
            H = np.zeros((self.B, lay.n_slots, 2, n, 3))
            H[:, :, :, a, :] = Ha
            for s in range(n_rel):
                H[:, s, :, self._rel_target[a, s], 1:3] = Ct
            Hs, r, Rb = _stack_rows(H.reshape(self.B, lay.n_slots, 2, 3 * n), z[:, a] - pred, R[:, a], m)
            x, P = kalman_update(x, P, Hs, Rb, r)
            self._store(x, P, active)

    def local_states(self, run: int = 0):
        x, P = self.joint()
        return [LocalState(i + 1, self.x[run, i].copy(), self.P[run, i].copy(),
                           {"joint_mean": x[run], "joint_cov": P[run]}) for i in range(self.n)]


# --- LS-CI -------------------------------------------------------------------------------

class LSCITeam(_LocalTeam):
    """Pose EKF per robot; relative observations fused by CI with min-trace weights.

    Targets' estimates are taken as they stood at the start of the
    observation step, before any fusion in that step.
    """

    name = "LS-CI"

    def propagate_arrays(self, v, omega, dt):
        self._propagate_pose(v, omega, dt)

    def observe_arrays(self, z, mask, R, links):
        rel = self._relative_mask(mask, links)
        z_lm, m_lm, R_lm, z_rel, R_rel = self._slots(z, mask, R)
        sx, sP = self.x.copy(), self.P.copy()
        if np.any(m_lm):
            H, r, Rb = self._landmark_system(self.x, z_lm, m_lm, R_lm)
            self.x, self.P = kalman_update(self.x, self.P, H, Rb, r)
            self.x[..., 0] = wrap_angle(self.x[..., 0])
        for s in range(self.layout.n_rel):
            m = rel[..., s]
            if not np.any(m):
                continue
            t = self._rel_target[:, s]
            x, P = ci_relative_update(self.x, self.P, sx[:, t, 1:3], sP[:, t, 1:3, 1:3],
                                      z_rel[..., s, :], R_rel[..., s, :, :])
            self.x = np.where(m[..., None], x, self.x)
            self.P = np.where(m[..., None, None], P, self.P)


# --- LS-SCI ------------------------------------------------------------------------------

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

    def propagate_arrays(self, v, omega, dt):
        self.x, F, G = pose_step(self.x, v, omega, dt)
        self.P_ind = symmetrize(F @ self.P_ind @ _T(F) + G @ self.noise.Q_w @ _T(G))
        self.P_dep = symmetrize(F @ self.P_dep @ _T(F))
        self.P = self.P_ind + self.P_dep

    def observe_arrays(self, z, mask, R, links):
        rel = self._relative_mask(mask, links)
        z_lm, m_lm, R_lm, z_rel, R_rel = self._slots(z, mask, R)
        sx, s_ind, s_dep = self.x.copy(), self.P_ind.copy(), self.P_dep.copy()
        if np.any(m_lm):
            H, r, Rb = self._landmark_system(self.x, z_lm, m_lm, R_lm)
            K = kalman_gain(self.P, H, Rb)
            A = np.eye(3) - K @ H
            self.x = self.x + (K @ r[..., None])[..., 0]
            self.x[..., 0] = wrap_angle(self.x[..., 0])
            self.P_ind = symmetrize(A @ self.P_ind @ _T(A) + K @ Rb @ _T(K))
            self.P_dep = symmetrize(A @ self.P_dep @ _T(A))
            self.P = self.P_ind + self.P_dep
        for s in range(self.layout.n_rel):
            m = rel[..., s]
            if not np.any(m):
                continue
            t = self._rel_target[:, s]
            zs, Rs = z_rel[..., s, :], R_rel[..., s, :, :]
            p_hat, R_rot, g = pseudo_position(self.x, sx[:, t, 1:3], zs, Rs)
            ind2 = s_ind[:, t, 1:3, 1:3] + R_rot
            dep2 = s_dep[:, t, 1:3, 1:3] + self.P[..., 0, 0, None, None] * g[..., :, None] * g[..., None, :]
            x, P_ind, P_dep = sci_update(self.x, self.P_ind, self.P_dep, p_hat, ind2, dep2)
            m1, m2 = m[..., None], m[..., None, None]
            self.x = np.where(m1, x, self.x)
            self.P_ind = np.where(m2, P_ind, self.P_ind)
            self.P_dep = np.where(m2, P_dep, self.P_dep)
            self.P = self.P_ind + self.P_dep

    def local_states(self, run: int = 0):
        return [LocalState(i + 1, self.x[run, i].copy(), self.P[run, i].copy(),
                           {"P_ind": self.P_ind[run, i].copy(), "P_dep": self.P_dep[run, i].copy()})
                for i in range(self.n)]


# --- LS-BDA ------------------------------------------------------------------------------

class LSBDATeam(_LocalTeam):
    """Block-diagonal approximation with stored cross-correlation factors.

    The cross covariance of robots i and j is ``sigma[i, j] @ sigma[j, i].T``.
    After a joint update of the observing pair, each robot rescales its
    factors towards third robots by ``P_new @ inv(P_old)``.  Observers are
    processed in id order, each one's landmarks first.
    """

    name = "LS-BDA"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.sigma = np.zeros((self.B, self.n, self.n, 3, 3))

    def propagate_arrays(self, v, omega, dt):
        F = self._propagate_pose(v, omega, dt)
        self.sigma = F[:, :, None] @ self.sigma

    def _rescale(self, i, P_old, active, skip=None):
        M = _T(np.linalg.solve(_T(P_old), _T(self.P[:, i])))
        others = [k for k in range(self.n) if k != i and k != skip]
        new = M[:, None] @ self.sigma[:, i, others]
        self.sigma[:, i, others] = np.where(active[:, None, None, None], new, self.sigma[:, i, others])

    def observe_arrays(self, z, mask, R, links):
        rel = self._relative_mask(mask, links)
        z_lm, m_lm, R_lm, z_rel, R_rel = self._slots(z, mask, R)
        for i in range(self.n):
            active = np.any(m_lm[:, i], axis=-1)
            if np.any(active):
                P_old = self.P[:, i].copy()
                H, r, Rb = self._landmark_system(self.x[:, i], z_lm[:, i], m_lm[:, i], R_lm[:, i])
                x, P = kalman_update(self.x[:, i], self.P[:, i], H, Rb, r)
                x[..., 0] = wrap_angle(x[..., 0])
                self.x[:, i] = np.where(active[:, None], x, self.x[:, i])
                self.P[:, i] = np.where(active[:, None, None], P, self.P[:, i])
                self._rescale(i, P_old, active)
            for s in range(self.layout.n_rel):
                m = rel[:, i, s]
                if np.any(m):
                    self._pair_update(i, int(self._rel_target[i, s]), z_rel[:, i, s], R_rel[:, i, s], m)

    def _pair_update(self, i, j, z, R, active):
        B = self.B
        x = np.concatenate([self.x[:, i], self.x[:, j]], axis=-1)
        P = np.zeros((B, 6, 6))
        P[:, :3, :3] = self.P[:, i]
        P[:, 3:, 3:] = self.P[:, j]
        P[:, :3, 3:] = self.sigma[:, i, j] @ _T(self.sigma[:, j, i])
        P[:, 3:, :3] = _T(P[:, :3, 3:])
        pred, Ha, Ct = relative_rows(self.x[:, i], self.x[:, j, None, 1:3])
        H = np.zeros((B, 2, 6))
        H[:, :, :3] = Ha[:, 0]
        H[:, :, 4:6] = Ct
        x, P = kalman_update(x, P, H, R, z - pred[:, 0])
        x[:, 0] = wrap_angle(x[:, 0])
        x[:, 3] = wrap_angle(x[:, 3])
        Pi_old, Pj_old = self.P[:, i].copy(), self.P[:, j].copy()
        a1, a2 = active[:, None], active[:, None, None]
        self.x[:, i] = np.where(a1, x[:, :3], self.x[:, i])
        self.x[:, j] = np.where(a1, x[:, 3:], self.x[:, j])
        self.P[:, i] = np.where(a2, P[:, :3, :3], self.P[:, i])
        self.P[:, j] = np.where(a2, P[:, 3:, 3:], self.P[:, j])
        self._rescale(i, Pi_old, active, skip=j)
        self._rescale(j, Pj_old, active, skip=i)
        self.sigma[:, i, j] = np.where(a2, P[:, :3, 3:], self.sigma[:, i, j])
        self.sigma[:, j, i] = np.where(a2, np.eye(3), self.sigma[:, j, i])

    def local_states(self, run: int = 0):
        return [LocalState(i + 1, self.x[run, i].copy(), self.P[run, i].copy(),
                           {"sigma": self.sigma[run, i].copy()}) for i in range(self.n)]


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
