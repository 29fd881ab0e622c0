"""Global-state cooperative localization with covariance intersection (GS-CI).

Robot ``i`` (1-based) tracks the positions of every robot plus its own
orientation.  Its state vector is ``[p_1, ..., (theta_i, p_i), ..., p_N]``,
so ``theta_i`` sits at index ``2(i-1)`` and the vector has ``2N+1`` entries.

Updates are split three ways: time propagation from the robot's own
odometry, observation updates from its own measurements (no communication
needed), and communication updates that fuse received estimates by
covariance intersection.

The position-only variant used by the boundedness analysis (orientation
supplied externally, state ``[p_1, ..., p_N]``) lives at the bottom.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    SingularInformation,
    IndexOutOfRange,
    UnknownTarget,
    WeightMismatch,
    ZeroSelfWeight,
)
from .estimation import (
    CIWeights,
    GaussianEstimate,
    ci_fuse,
    from_information,
    information_sum,
    kalman_update,
    select_ci_weights,
    spd_inv,
    symmetrize,
)
from .models import (
    J_ROT,
    BEARING_RANGE,
    Measurement,
    NoiseConfig,
    OdometryInput,
    RobotPose,
    bearing_range_to_relative,
    rotation,
    unicycle_jacobians,
    unicycle_propagate,
    wrap_angle,
)
from .team import TeamFilter


def theta_index(i: int) -> int:
    return 2 * (i - 1)


def position_index(j: int, i: int) -> int:
    """Start index of robot j's position inside robot i's global state."""
    return 2 * (j - 1) + (1 if j >= i else 0)


@dataclass(frozen=True, eq=False)
class GlobalState:
    robot_id: int
    n_robots: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        dim = 2 * self.n_robots + 1
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if mean.size != dim or cov.shape != (dim, dim):
            raise DimensionMismatch(f"global state of {self.n_robots} robots needs dimension {dim}")
        if not 1 <= self.robot_id <= self.n_robots:
            raise IndexOutOfRange(f"robot id {self.robot_id} outside 1..{self.n_robots}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class CommMessage:
    sender: int
    mean: np.ndarray
    cov: np.ndarray
    time: float = 0.0

    @classmethod
    def from_state(cls, state: GlobalState, time: float = 0.0) -> "CommMessage":
        return cls(state.robot_id, state.mean.copy(), state.cov.copy(), time)


def initial_global_state(robot_id: int, poses: Sequence[RobotPose], pos_var: float,
                         theta_var: float) -> GlobalState:
    n = len(poses)
    mean = np.empty(2 * n + 1)
    var = np.full(2 * n + 1, float(pos_var))
    for j, pose in enumerate(poses, start=1):
        k = position_index(j, robot_id)
        mean[k:k + 2] = pose.position
    mean[theta_index(robot_id)] = poses[robot_id - 1].theta
    var[theta_index(robot_id)] = theta_var
    return GlobalState(robot_id, n, mean, np.diag(var))


def own_pose(state: GlobalState) -> RobotPose:
    k = theta_index(state.robot_id)
    return RobotPose(state.mean[k], state.mean[k + 1:k + 3])


def position_of(state: GlobalState, j: int) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= j <= state.n_robots:
        raise IndexOutOfRange(f"robot id {j} outside 1..{state.n_robots}")
    k = position_index(j, state.robot_id)
    return state.mean[k:k + 2].copy(), state.cov[k:k + 2, k:k + 2].copy()


# --- time propagation ----------------------------------------------------------

def other_increment(noise: NoiseConfig, dt: float, other_mode: str) -> float:
    if other_mode == "analysis":
        return noise.analysis_increment(dt)
    if other_mode == "replay":
        return noise.replay_increment(dt)
    raise ValueError(f"unknown other_mode {other_mode!r}")


def time_propagate(state: GlobalState, own_input: OdometryInput, noise: NoiseConfig,
                   other_mode: str = "replay") -> GlobalState:
    """Propagate the own pose with odometry; others keep their mean and gain variance.

    ``other_mode`` picks the variance growth for the other robots' positions:
    ``"analysis"`` uses dt^2 max(sigma_u^2, u_max^2 sigma_theta^2), ``"replay"``
    uses dt^2 sigma_u^2.
    """
    k = theta_index(state.robot_id)
    own = slice(k, k + 3)
    q = state.mean[own]
    F, G = unicycle_jacobians(q, own_input)

    mean = state.mean.copy()
    mean[own] = unicycle_propagate(RobotPose.from_vector(q), own_input).as_vector()

    cov = state.cov.copy()
    cov[own, :] = F @ cov[own, :]
    cov[:, own] = cov[:, own] @ F.T
    cov[own, own] += G @ noise.Q_w @ G.T

    inc = other_increment(noise, own_input.dt, other_mode)
    if inc:
        diag = np.arange(state.dim)
        others = diag[(diag < k) | (diag >= k + 3)]
        cov[others, others] += inc
    return GlobalState(state.robot_id, state.n_robots, mean, symmetrize(cov))


# --- observation -----------------------------------------------------------------

def _target_position(state: GlobalState, target, landmarks) -> tuple[np.ndarray, int | None]:
    if isinstance(target, (int, np.integer)) and not isinstance(target, bool):
        if not 1 <= target <= state.n_robots or target == state.robot_id:
            raise UnknownTarget(target)
        k = position_index(int(target), state.robot_id)
        return state.mean[k:k + 2], k
    if target in landmarks:
        return np.asarray(landmarks[target], dtype=float), None
    raise UnknownTarget(target)


def _stacked_noise(measurements, joint_cov):
    if joint_cov is not None:
        joint_cov = np.asarray(joint_cov, dtype=float)
        if joint_cov.shape != (2 * len(measurements),) * 2:
            raise DimensionMismatch("joint noise covariance does not match the batch")
        return joint_cov
    R = np.zeros((2 * len(measurements),) * 2)
    for r, m in enumerate(measurements):
        R[2 * r:2 * r + 2, 2 * r:2 * r + 2] = m.noise_cov
    return R


def observation_update(state: GlobalState, batch: Sequence[Measurement],
                       landmarks: Mapping, joint_cov=None) -> GlobalState:
    """Stacked EKF update with all of the robot's measurements from one instant.

    Bearing-and-range measurements are first converted to relative position.
    Noise is block diagonal per measurement unless ``joint_cov`` is given.
    """
    if not batch:
        return state
    i = state.robot_id
    measurements = [bearing_range_to_relative(m) if m.kind == BEARING_RANGE else m for m in batch]
    for m in measurements:
        if m.observer != i:
            raise ValueError(f"measurement by robot {m.observer} given to robot {i}")

    k = theta_index(i)
    theta = state.mean[k]
    p_i = state.mean[k + 1:k + 3]
    Ct = rotation(theta).T
    CtJ = Ct @ J_ROT

    n_obs = len(measurements)
    H = np.zeros((2 * n_obs, state.dim))
    residual = np.empty(2 * n_obs)
    for r, m in enumerate(measurements):
        p_t, kt = _target_position(state, m.target, landmarks)
        d = p_t - p_i
        rows = slice(2 * r, 2 * r + 2)
        residual[rows] = m.value - Ct @ d
        H[rows, k] = CtJ @ d
        H[rows, k + 1:k + 3] = -Ct
        if kt is not None:
            H[rows, kt:kt + 2] = Ct
    R = _stacked_noise(measurements, joint_cov)
    mean, cov = kalman_update(state.mean, state.cov, H, R, residual)
    mean[k] = wrap_angle(mean[k])
    return GlobalState(i, state.n_robots, mean, cov)


# --- communication ---------------------------------------------------------------

def t_minus(j: int, n_robots: int) -> np.ndarray:
    """The 2N x (2N+1) selection matrix that drops theta_j (1-based indices in the rule)."""
    T = np.zeros((2 * n_robots, 2 * n_robots + 1))
    for n in range(1, 2 * n_robots + 2):
        if n <= 2 * (j - 1):
            T[n - 1, n - 1] = 1.0
        elif n >= 2 * j:
            T[n - 2, n - 1] = 1.0
    return T


def t_plus(i: int, n_robots: int) -> np.ndarray:
    """The (2N+1) x 2N matrix that re-inserts an empty slot for theta_i."""
    T = np.zeros((2 * n_robots + 1, 2 * n_robots))
    for n in range(1, 2 * n_robots + 1):
        if n <= 2 * (i - 1):
            T[n - 1, n - 1] = 1.0
        elif n >= 2 * i - 1:
            T[n, n - 1] = 1.0
    return T


def strip_orientation(msg: CommMessage) -> GaussianEstimate:
    k = theta_index(msg.sender)
    mean = np.delete(msg.mean, k)
    cov = np.delete(np.delete(msg.cov, k, axis=0), k, axis=1)
    return GaussianEstimate.moment(mean, cov)


def inject_dummy_orientation(est: GaussianEstimate, receiver: int) -> GaussianEstimate:
    """Information form over the receiver's layout with no information about theta_i."""
    info = spd_inv(est.cov)
    info_mean = info @ est.mean
    k = theta_index(receiver)
    dim = est.dim + 1
    keep = np.r_[0:k, k + 1:dim]
    full = np.zeros((dim, dim))
    full[np.ix_(keep, keep)] = info
    vec = np.zeros(dim)
    vec[keep] = info_mean
    return GaussianEstimate.information(vec, full)


def default_ci_weights(n_msgs: int, self_weight: float = 0.5) -> CIWeights:
    if n_msgs == 0:
        return CIWeights([1.0])
    rest = (1.0 - self_weight) / n_msgs
    return CIWeights(np.r_[self_weight, np.full(n_msgs, rest)])


def communication_update(state: GlobalState, msgs: Sequence[CommMessage],
                         w: CIWeights | Sequence[float] | None = None,
                         fusion: str = "ci") -> GlobalState:
    """Fuse received estimates with the own one.

    ``w[0]`` is the self weight, ``w[k]`` belongs to ``msgs[k-1]``.  With
    ``fusion="naive"`` the weights are ignored and information is simply
    added, which double counts shared information (negative control only).
    """
    if w is None:
        w = default_ci_weights(len(msgs))
    elif not isinstance(w, CIWeights):
        w = CIWeights(w)
    if len(w) != len(msgs) + 1:
        raise WeightMismatch(f"{len(msgs)} messages need {len(msgs) + 1} weights, got {len(w)}")
    if w[0] <= 0:
        raise ZeroSelfWeight("self weight must be positive")
    if not msgs:
        return state
    own = GaussianEstimate.moment(state.mean, state.cov)
    incoming = [inject_dummy_orientation(strip_orientation(m), state.robot_id) for m in msgs]
    if fusion == "ci":
        fused = ci_fuse([own, *incoming], w)
    elif fusion == "naive":
        fused = information_sum([own, *incoming])
    else:
        raise ValueError(f"unknown fusion {fusion!r}")
    out = from_information(fused)
    mean = out.mean.copy()
    k = theta_index(state.robot_id)
    mean[k] = wrap_angle(mean[k])
    return GlobalState(state.robot_id, state.n_robots, mean, out.cov)


def fresh_messages(msgs: Iterable[CommMessage], now: float, max_age: float) -> list[CommMessage]:
    """Latest message per sender, dropping those older than ``max_age``."""
    latest: dict[int, CommMessage] = {}
    for m in msgs:
        if now - m.time > max_age + 1e-12:
            continue
        if m.sender not in latest or m.time >= latest[m.sender].time:
            latest[m.sender] = m
    return [latest[s] for s in sorted(latest)]


class GSCITeam(TeamFilter):
    """GS-CI running on every robot of a team, for B runs at once.

    ``mean`` is (B, N, 2N+1) and ``cov`` (B, N, 2N+1, 2N+1); entry [b, i]
    is robot i+1's global state in run b.  The updates are the vectorized
    counterparts of ``time_propagate``, ``observation_update`` and
    ``communication_update``.
    """

    name = "GS-CI"

    def __init__(self, n_robots, landmarks, noise: NoiseConfig, init_poses, init_pos_var=1e-4,
                 init_theta_var=1e-4, self_weight=0.5, weight_strategy="fixed", fusion="ci",
                 other_mode="replay", n_runs=None):
        """``init_poses`` is a list of RobotPose (one run) or a list of such lists."""
        runs = _as_runs(init_poses)
        super().__init__(n_robots, landmarks, len(runs) if n_runs is None else n_runs)
        if len(runs) != self.B:
            raise DimensionMismatch(f"{len(runs)} initial pose sets for {self.B} runs")
        if weight_strategy not in ("fixed", "min_trace"):
            raise ValueError(f"unknown weight strategy {weight_strategy!r}")
        if fusion not in ("ci", "naive"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.noise = noise
        self.self_weight = self_weight
        self.weight_strategy = weight_strategy
        self.fusion = fusion
        self.other_mode = other_mode
        n = n_robots
        self.D = 2 * n + 1
        ar = np.arange(n)
        self._ar = ar
        self._th = 2 * ar
        self._pos = np.array([[position_index(j + 1, i + 1) for j in range(n)] for i in range(n)])
        self._keep = np.array([np.r_[0:2 * i, 2 * i + 1:self.D] for i in range(n)])
        self._eth = np.zeros((n, self.D))
        self._eth[ar, self._th] = 1.0
        # position selectors per slot: target minus own (landmarks: minus own only)
        lay = self.layout
        sel = np.zeros((n, lay.n_slots, 2, self.D))
        for i in range(n):
            for s_ in range(lay.n_slots):
                sel[i, s_, :, self._pos[i, i]:self._pos[i, i] + 2] -= np.eye(2)
                j = lay.target_robot[i, s_]
                if j >= 0:
                    sel[i, s_, :, self._pos[i, j]:self._pos[i, j] + 2] += np.eye(2)
        self._sel = sel
        own = self._th[:, None] + np.arange(3)
        other = np.ones((n, self.D), dtype=bool)
        other[ar[:, None], own] = False
        self._other_i, self._other_k = np.nonzero(other)
        self._own = own

        self.mean = np.empty((self.B, n, self.D))
        self.cov = np.empty((self.B, n, self.D, self.D))
        for b, poses in enumerate(runs):
            for i in range(n):
                st = initial_global_state(i + 1, poses, init_pos_var, init_theta_var)
                self.mean[b, i] = st.mean
                self.cov[b, i] = st.cov

    # views ------------------------------------------------------------------------------

    def state(self, robot_id: int, run: int = 0) -> GlobalState:
        i = robot_id - 1
        return GlobalState(robot_id, self.n, self.mean[run, i].copy(), self.cov[run, i].copy())

    @property
    def states(self) -> list[GlobalState]:
        return [self.state(i + 1, 0) for i in range(self.n)]

    def position_estimates(self):
        ar = self._ar
        k = self._pos[ar, ar]
        idx = k[:, None] + np.arange(2)
        means = self.mean[:, ar[:, None], idx]
        covs = self.cov[:, ar[:, None, None], idx[:, :, None], idx[:, None, :]]
        return means, covs

    # updates ----------------------------------------------------------------------------

    def propagate_arrays(self, v, omega, dt):
        ar, th = self._ar, self._th
        theta = self.mean[:, ar, th]
        c, s = np.cos(theta), np.sin(theta)
        self.mean[:, ar, th] = wrap_angle(theta + omega * dt)
        self.mean[:, ar, th + 1] += v * dt * c
        self.mean[:, ar, th + 2] += v * dt * s

        F = np.broadcast_to(np.eye(self.D), self.cov.shape).copy()
        F[:, ar, th + 1, th] = -v * dt * s
        F[:, ar, th + 2, th] = v * dt * c
        cov = F @ self.cov @ np.swapaxes(F, -1, -2)
        G = np.zeros(theta.shape + (3, 2))
        G[..., 0, 1] = dt
        G[..., 1, 0] = dt * c
        G[..., 2, 0] = dt * s
        own = self._own
        cov[:, ar[:, None, None], own[:, :, None], own[:, None, :]] += G @ self.noise.Q_w @ np.swapaxes(G, -1, -2)
        inc = other_increment(self.noise, dt, self.other_mode)
        if inc:
            cov[:, self._other_i, self._other_k, self._other_k] += inc
        self.cov = symmetrize(cov)

    def observe_arrays(self, z, mask, R, links=None):
        if not np.any(mask):
            return
        ar, th = self._ar, self._th
        lay = self.layout
        B, n, S = mask.shape
        theta = self.mean[:, ar, th]
        p_i = self.mean[:, ar[:, None], th[:, None] + 1 + np.arange(2)]
        tp = np.empty((B, n, S, 2))
        rel = lay.target_robot[:, :lay.n_rel]
        kidx = self._pos[ar[:, None], rel]
        tp[:, :, :lay.n_rel] = self.mean[:, ar[:, None, None], kidx[:, :, None] + np.arange(2)]
        tp[:, :, lay.n_rel:] = lay.landmark_pos
        d = tp - p_i[:, :, None]
        c, s = np.cos(theta), np.sin(theta)
        Ct = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)
        pred = np.einsum("bnxy,bnsy->bnsx", Ct, d)
        h_th = np.einsum("bnxy,bnsy->bnsx", Ct @ J_ROT, d)
        H = np.einsum("bnxy,nsyd->bnsxd", Ct, self._sel)
        H += h_th[..., None] * self._eth[None, :, None, None, :]
        m = mask[..., None]
        H = H * m[..., None]
        resid = np.where(m, z - pred, 0.0)
        Rm = np.where(m[..., None], np.broadcast_to(R, (B, n, S, 2, 2)), np.eye(2))
        Rb = np.einsum("bnsxy,st->bnsxty", Rm, np.eye(S)).reshape(B, n, 2 * S, 2 * S)
        H = H.reshape(B, n, 2 * S, self.D)
        mean, cov = kalman_update(self.mean, self.cov, H, Rb, resid.reshape(B, n, 2 * S))
        any_m = np.any(mask, axis=-1)
        self.mean = np.where(any_m[..., None], mean, self.mean)
        self.cov = np.where(any_m[..., None, None], cov, self.cov)
        self.mean[:, ar, th] = wrap_angle(self.mean[:, ar, th])

    def communicate_arrays(self, links):
        links = np.asarray(links, dtype=bool)
        ar = self._ar
        n = self.n
        links = links & ~np.eye(n, dtype=bool)
        counts = links.sum(axis=1)                       # (B, N) messages per receiver
        recv = counts > 0
        if not np.any(recv):
            return
        keep = self._keep
        cov_s = self.cov[:, ar[:, None, None], keep[:, :, None], keep[:, None, :]]
        mean_s = self.mean[:, ar[:, None], keep]
        info_s = spd_inv(cov_s)
        y_s = (info_s @ mean_s[..., None])[..., 0]

        if self.fusion == "naive":
            W = links.astype(float)
            self_w = np.ones_like(counts, dtype=float)
        elif self.weight_strategy == "fixed":
            W = links * ((1.0 - self.self_weight) / np.maximum(counts, 1))[:, None, :]
            self_w = np.full(counts.shape, self.self_weight)
        else:
            W, self_w = self._min_trace_weights(links, info_s)

        info_sum = np.einsum("bji,bjxy->bixy", W, info_s)
        y_sum = np.einsum("bji,bjx->bix", W, y_s)
        info_own = spd_inv(self.cov)
        y_own = (info_own @ self.mean[..., None])[..., 0]
        fused = self_w[..., None, None] * info_own
        fused[:, ar[:, None, None], keep[:, :, None], keep[:, None, :]] += info_sum
        y = self_w[..., None] * y_own
        y[:, ar[:, None], keep] += y_sum

        sel = np.nonzero(recv)
        cov = spd_inv(symmetrize(fused[sel]), exc=SingularInformation)
        self.cov[sel] = cov
        self.mean[sel] = (cov @ y[sel][..., None])[..., 0]
        self.mean[:, ar, self._th] = wrap_angle(self.mean[:, ar, self._th])

    def _min_trace_weights(self, links, info_s):
        B, n = links.shape[0], self.n
        W = np.zeros(links.shape)
        self_w = np.ones((B, n))
        for b in range(B):
            for i in range(n):
                senders = np.flatnonzero(links[b, :, i])
                if senders.size == 0:
                    continue
                st = self.state(i + 1, b)
                own = GaussianEstimate.moment(st.mean, st.cov)
                ests = [own]
                for j in senders:
                    full = np.zeros((self.D, self.D))
                    full[np.ix_(self._keep[i], self._keep[i])] = info_s[b, j]
                    ests.append(GaussianEstimate.information(np.zeros(self.D), full))
                w = select_ci_weights(ests, "min_trace").weights
                self_w[b, i] = w[0]
                W[b, senders, i] = w[1:]
        return W, self_w


def _as_runs(init_poses):
    if init_poses and isinstance(init_poses[0], RobotPose):
        return [list(init_poses)]
    return [list(p) for p in init_poses]


# --- position-only analysis mode -------------------------------------------------

@dataclass(frozen=True, eq=False)
class PositionState:
    """Estimate of all robot positions held by one robot; orientation comes from outside."""

    robot_id: int
    n_robots: int
    mean: np.ndarray
    cov: np.ndarray

    def block(self, j: int) -> slice:
        return slice(2 * (j - 1), 2 * j)


def analysis_propagate(state: PositionState, theta_hat: float, v: float, dt: float,
                       noise: NoiseConfig) -> PositionState:
    b = state.block(state.robot_id)
    C = rotation(theta_hat)
    mean = state.mean.copy()
    mean[b] += v * dt * C[:, 0]
    cov = state.cov + noise.analysis_increment(dt) * np.eye(state.mean.size)
    own = dt**2 * C @ np.diag([noise.Q_w[0, 0], v**2 * noise.sigma_theta_sq]) @ C.T
    cov[b, b] += own - noise.analysis_increment(dt) * np.eye(2)
    return PositionState(state.robot_id, state.n_robots, mean, symmetrize(cov))


def analysis_observation_matrices(state: PositionState, batch: Sequence[Measurement],
                                  theta_hat: float, landmarks: Mapping, sigma_theta_sq: float):
    """Stacked Jacobian, residual and effective noise (orientation error folded in)."""
    i = state.robot_id
    Ct = rotation(theta_hat).T
    CtJ = Ct @ J_ROT
    bi = state.block(i)
    p_i = state.mean[bi]
    n_obs = len(batch)
    H = np.zeros((2 * n_obs, state.mean.size))
    residual = np.empty(2 * n_obs)
    h_theta = np.empty(2 * n_obs)
    R = np.zeros((2 * n_obs, 2 * n_obs))
    for r, m in enumerate(batch):
        m = bearing_range_to_relative(m)
        rows = slice(2 * r, 2 * r + 2)
        if isinstance(m.target, (int, np.integer)):
            bt = state.block(int(m.target))
            p_t = state.mean[bt]
            H[rows, bt] = Ct
        elif m.target in landmarks:
            p_t = np.asarray(landmarks[m.target], dtype=float)
        else:
            raise UnknownTarget(m.target)
        H[rows, bi] = -Ct
        d = p_t - p_i
        residual[rows] = m.value - Ct @ d
        h_theta[rows] = CtJ @ d
        R[rows, rows] = m.noise_cov
    R = R + sigma_theta_sq * np.outer(h_theta, h_theta)
    return H, residual, R


def analysis_observe(state: PositionState, batch: Sequence[Measurement], theta_hat: float,
                     landmarks: Mapping, sigma_theta_sq: float) -> PositionState:
    if not batch:
        return state
    H, residual, R = analysis_observation_matrices(state, batch, theta_hat, landmarks,
                                                   sigma_theta_sq)
    mean, cov = kalman_update(state.mean, state.cov, H, R, residual)
    return PositionState(state.robot_id, state.n_robots, mean, cov)


def analysis_communicate(state: PositionState, others: Sequence[PositionState],
                         w: CIWeights | Sequence[float] | None = None) -> PositionState:
    if not others:
        return state
    if w is None:
        w = default_ci_weights(len(others))
    ests = [GaussianEstimate.moment(s.mean, s.cov) for s in (state, *others)]
    out = from_information(ci_fuse(ests, w))
    return PositionState(state.robot_id, state.n_robots, out.mean, out.cov)
