"""Scenario engine: world synthesis, link failures, metrics and experiment drivers.

All randomness comes from independent streams derived from one integer
seed, one stream per concern (truth, measurement, graph, link), so changing
e.g. the failure probability leaves the trajectory untouched and every
algorithm in a run sees exactly the same world.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import chi2
import yaml

from .baselines import LSBDATeam, LSCenTeam, LSCITeam, LSSCITeam
from .errors import BoundViolation, CoincidentPoints, ConfigError, LengthMismatch
from .graphs import (
    LANDMARK,
    TopologyGraph,
    UpperBoundState,
    check_r_bound,
    h_check,
    is_landmark,
    psi_communicate,
    psi_observe,
    psi_propagate,
    q_check_matrix,
    r_check_matrix,
)
from .gsci import (
    GSCITeam,
    PositionState,
    analysis_communicate,
    analysis_observation_matrices,
    analysis_observe,
    analysis_propagate,
    default_ci_weights,
)
from .models import (
    BEARING_RANGE,
    RANGE_PSD_FLOOR,
    Measurement,
    wrap_angle,
    RELATIVE_XY,
    NoiseConfig,
    OdometryInput,
    RobotPose,
    bearing_range_observation,
    relative_observation,
    rotation,
)
from .team import SlotLayout

ALGORITHMS = ("LS-Cen", "LS-CI", "LS-SCI", "LS-BDA", "GS-CI")
CSV_HEADER = ("t", "algorithm", "rmse", "rmte", "rho", "density", "seed")

TRUTH, MEASUREMENT, GRAPH, LINK = 0, 1, 2, 3

VERBATIM = "verbatim"
CONVENTIONAL = "conventional"


# --- random streams ------------------------------------------------------------------

def stream(seed: int, concern: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(concern, *key)))


# --- configuration -------------------------------------------------------------------

def _noise_from_dict(d: Mapping | None) -> NoiseConfig:
    if not d:
        return NoiseConfig()
    kw = {}
    for key, val in d.items():
        if key in ("Q_w", "R_landmark", "R_relative", "R_bearing_range"):
            arr = np.asarray(val, dtype=float)
            kw[key] = np.diag(arr) if arr.ndim == 1 else arr
        elif key in ("sigma_u_sq", "u_max", "sigma_theta_sq"):
            kw[key] = float(val)
        else:
            raise ConfigError(f"unknown noise key {key!r}")
    try:
        return NoiseConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _noise_to_dict(n: NoiseConfig) -> dict:
    return {
        "Q_w": n.Q_w.tolist(), "sigma_u_sq": n.sigma_u_sq, "u_max": n.u_max,
        "sigma_theta_sq": n.sigma_theta_sq, "R_landmark": n.R_landmark.tolist(),
        "R_relative": n.R_relative.tolist(), "R_bearing_range": n.R_bearing_range.tolist(),
    }


@dataclass(frozen=True, eq=False)
class GraphSpec:
    """Either an explicit edge list, a random density, or the complete graph."""

    edges: tuple | None = None
    density: float | None = None
    complete: bool = False

    @classmethod
    def parse(cls, d) -> "GraphSpec":
        if d is None:
            return cls(edges=())
        if d == "complete":
            return cls(complete=True)
        if not isinstance(d, Mapping):
            raise ConfigError(f"graph must be a mapping or 'complete', got {d!r}")
        if "edges" in d:
            edges = []
            for e in d["edges"]:
                if len(e) != 2:
                    raise ConfigError(f"edge {e!r} needs two endpoints")
                edges.append(tuple(_node(x) for x in e))
            return cls(edges=tuple(edges))
        if "density" in d:
            dens = float(d["density"])
            if not 0.0 <= dens <= 1.0:
                raise ConfigError(f"density {dens} outside [0, 1]")
            return cls(density=dens)
        if d.get("complete"):
            return cls(complete=True)
        raise ConfigError(f"cannot read graph {d!r}")

    def to_dict(self):
        if self.complete:
            return "complete"
        if self.density is not None:
            return {"density": self.density}
        return {"edges": [list(e) for e in self.edges]}


def _node(x):
    if isinstance(x, str):
        return x if is_landmark(x) and not x.isdigit() else int(x)
    return int(x)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    n_robots: int = 5
    landmarks: Mapping[str, tuple] = field(default_factory=lambda: {LANDMARK: (0.0, 0.0)})
    obs_graph: GraphSpec = field(default_factory=lambda: GraphSpec(density=0.75))
    comm_graph: GraphSpec = field(default_factory=lambda: GraphSpec(complete=True))
    ls_comm: str = "graph"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ci_weights: str = "fixed"
    self_weight: float = 0.5
    dt: float = 1.0
    steps: int = 1000
    seed: int = 0
    graph_index: int = 0
    velocity_range: tuple = (-0.09, 0.09)
    omega_range: tuple = (-0.1, 0.1)
    failure_rho: float = 0.0
    comm_blackouts: tuple = ()
    measurement: str = RELATIVE_XY
    rmse: str = VERBATIM
    init_spread: float = 5.0
    init_pos_var: float = 1e-4
    init_theta_var: float = 1e-4
    other_mode: str = "replay"
    gs_fusion: str = "ci"

    def __post_init__(self):
        if int(self.n_robots) < 1:
            raise ConfigError("n_robots must be at least 1")
        if not 0.0 <= self.failure_rho <= 1.0:
            raise ConfigError(f"failure_rho {self.failure_rho} outside [0, 1]")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if int(self.steps) < 1:
            raise ConfigError("steps must be at least 1")
        lo, hi = self.velocity_range
        if lo > hi:
            raise ConfigError("velocity_range is reversed")
        if self.omega_range[0] > self.omega_range[1]:
            raise ConfigError("omega_range is reversed")
        horizon = self.steps * self.dt
        for b in self.comm_blackouts:
            if len(b) != 2 or not 0 <= b[0] < b[1] <= horizon + 1e-9:
                raise ConfigError(f"blackout {b!r} is not an interval inside [0, {horizon}]")
        if self.ls_comm not in ("graph", "complete"):
            raise ConfigError(f"ls_comm must be 'graph' or 'complete', got {self.ls_comm!r}")
        if self.ci_weights not in ("fixed", "min_trace"):
            raise ConfigError(f"unknown ci_weights policy {self.ci_weights!r}")
        if not 0.0 < self.self_weight <= 1.0:
            raise ConfigError("self_weight must be in (0, 1]")
        if self.measurement not in (RELATIVE_XY, BEARING_RANGE):
            raise ConfigError(f"unknown measurement kind {self.measurement!r}")
        if self.rmse not in (VERBATIM, CONVENTIONAL):
            raise ConfigError(f"unknown rmse mode {self.rmse!r}")
        if self.other_mode not in ("replay", "analysis"):
            raise ConfigError(f"unknown other_mode {self.other_mode!r}")
        if self.gs_fusion not in ("ci", "naive"):
            raise ConfigError(f"unknown gs_fusion {self.gs_fusion!r}")

    # serialization -----------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("scenario document must be a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "landmarks" in kw:
                kw["landmarks"] = {str(k): tuple(float(c) for c in v) for k, v in kw["landmarks"].items()}
            for g in ("obs_graph", "comm_graph"):
                if g in kw:
                    kw[g] = GraphSpec.parse(kw[g])
            if "noise" in kw:
                kw["noise"] = _noise_from_dict(kw["noise"])
            for key in ("velocity_range", "omega_range"):
                if key in kw:
                    kw[key] = tuple(float(v) for v in kw[key])
            if "comm_blackouts" in kw:
                kw["comm_blackouts"] = tuple(tuple(float(v) for v in b) for b in kw["comm_blackouts"] or ())
            for key in ("n_robots", "steps", "seed", "graph_index"):
                if key in kw:
                    kw[key] = int(kw[key])
            for key in ("dt", "failure_rho", "self_weight", "init_spread", "init_pos_var", "init_theta_var"):
                if key in kw:
                    kw[key] = float(kw[key])
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"malformed scenario value: {exc}") from exc
        return cls(**kw)

    @classmethod
    def from_yaml(cls, text: str) -> "ScenarioConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse scenario: {exc}") from exc
        return cls.from_dict(doc or {})

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_yaml(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "n_robots": self.n_robots,
            "landmarks": {k: list(v) for k, v in self.landmarks.items()},
            "obs_graph": self.obs_graph.to_dict(),
            "comm_graph": self.comm_graph.to_dict(),
            "ls_comm": self.ls_comm,
            "noise": _noise_to_dict(self.noise),
            "ci_weights": self.ci_weights,
            "self_weight": self.self_weight,
            "dt": self.dt,
            "steps": self.steps,
            "seed": self.seed,
            "graph_index": self.graph_index,
            "velocity_range": list(self.velocity_range),
            "omega_range": list(self.omega_range),
            "failure_rho": self.failure_rho,
            "comm_blackouts": [list(b) for b in self.comm_blackouts],
            "measurement": self.measurement,
            "rmse": self.rmse,
            "init_spread": self.init_spread,
            "init_pos_var": self.init_pos_var,
            "init_theta_var": self.init_theta_var,
            "other_mode": self.other_mode,
            "gs_fusion": self.gs_fusion,
        }

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    @property
    def comm_density(self) -> float:
        if self.comm_graph.complete:
            return 1.0
        if self.comm_graph.density is not None:
            return self.comm_graph.density
        n = self.n_robots
        return len(self.comm_graph.edges) / max(n * (n - 1), 1)


def config_digest(config: ScenarioConfig | Mapping) -> str:
    d = config.to_dict() if isinstance(config, ScenarioConfig) else config
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# --- graphs --------------------------------------------------------------------------

def generate_random_graph(n_nodes: int, density: float, rng: np.random.Generator,
                          landmarks: Sequence[str] = ()) -> TopologyGraph:
    """Each ordered pair of robots, and each robot-to-landmark pair, independently
    present with probability ``density``.

    One uniform matrix is drawn regardless of ``density``, so graphs from the
    same generator state are nested: raising the density only adds edges.
    """
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density {density} outside [0, 1]")
    lms = list(landmarks)
    U = rng.random((n_nodes, n_nodes + len(lms)))
    targets = list(range(1, n_nodes + 1)) + lms
    edges = [(i + 1, targets[k]) for i in range(n_nodes) for k in range(len(targets))
             if targets[k] != i + 1 and U[i, k] < density]
    return TopologyGraph.over(n_nodes, edges, lms)


def complete_graph(n_robots: int, landmarks: Sequence[str] = ()) -> TopologyGraph:
    ids = range(1, n_robots + 1)
    return TopologyGraph.over(n_robots, [(a, b) for a in ids for b in ids if a != b], landmarks)


def resolve_graphs(config: ScenarioConfig) -> tuple[TopologyGraph, TopologyGraph]:
    """Observation graph (robots and landmarks) and communication graph for a run."""
    n = config.n_robots
    lms = sorted(config.landmarks)

    def build(spec: GraphSpec, kind: int, with_landmarks: bool):
        if spec.complete:
            g = complete_graph(n, lms)
            if with_landmarks:
                g = g.with_edges((i, l) for i in range(1, n + 1) for l in lms)
            return g
        if spec.density is not None:
            rng = stream(config.seed, GRAPH, config.graph_index, kind)
            return generate_random_graph(n, spec.density, rng, lms if with_landmarks else ())
        return TopologyGraph.over(n, spec.edges, lms)

    return build(config.obs_graph, 0, True), build(config.comm_graph, 1, False)


# --- world synthesis --------------------------------------------------------------------

def initial_poses(config: ScenarioConfig) -> list[RobotPose]:
    rng = stream(config.seed, TRUTH, config.graph_index, 0)
    s = config.init_spread
    pos = rng.uniform(-s, s, size=(config.n_robots, 2))
    th = rng.uniform(-np.pi, np.pi, size=config.n_robots)
    return [RobotPose(t, p) for t, p in zip(th, pos)]


def step_world(truth: Sequence[RobotPose], inputs: Sequence[OdometryInput], noise: NoiseConfig,
               rng: np.random.Generator, obs_graph: TopologyGraph | None = None,
               landmarks: Mapping | None = None, kind: str = RELATIVE_XY,
               time: float = 0.0) -> tuple[list[RobotPose], dict[int, list]]:
    """Move every robot with its true input and measure every observation edge.

    Measurements are taken at the new poses; edges are visited in sorted
    order so the noise draws are reproducible.
    """
    new = []
    for pose, u in zip(truth, inputs):
        c, s = np.cos(pose.theta), np.sin(pose.theta)
        new.append(RobotPose(pose.theta + u.omega * u.dt,
                             pose.position + u.v * u.dt * np.array([c, s])))
    batches: dict[int, list] = {}
    if obs_graph is None:
        return new, batches
    landmarks = landmarks or {}
    edges = obs_graph.sorted_edges()
    z = rng.standard_normal((len(edges), 2))
    roots = {}
    for (a, b), zk in zip(edges, z):
        if is_landmark(b):
            target = np.asarray(landmarks[b], dtype=float)
            R = noise.R_landmark
        else:
            target = new[b - 1].position
            R = noise.R_relative
        if kind == BEARING_RANGE:
            R = noise.R_bearing_range
        key = id(R)
        if key not in roots:
            roots[key] = psd_sqrt(R)
        v = roots[key] @ zk
        make = bearing_range_observation if kind == BEARING_RANGE else relative_observation
        m = make(new[a - 1], target, v, observer_id=a, target_id=b, noise_cov=R, time=time)
        batches.setdefault(a, []).append(m)
    return new, batches


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """A square root L with L @ L.T = m, valid for singular m."""
    w, v = np.linalg.eigh(m)
    return v * np.sqrt(np.clip(w, 0.0, None))


def in_blackout(t: float, blackouts: Iterable) -> bool:
    return any(b0 <= t < b1 for b0, b1 in blackouts)


def deliver_messages(comm_graph: TopologyGraph, rho: float, blackouts: Iterable, t: float,
                     rng: np.random.Generator) -> frozenset:
    """Links delivered at time ``t``.

    One uniform is drawn per ordered robot pair every tick, whatever the
    graph, so failure draws stay aligned across graphs and algorithms.
    """
    robots = comm_graph.robots
    n = max(robots) if robots else 0
    U = rng.random((n, n))
    if in_blackout(t, blackouts):
        return frozenset()
    return frozenset((a, b) for a, b in comm_graph.edges if U[a - 1, b - 1] >= rho)


@dataclass(eq=False)
class World:
    """Synthesized worlds for B runs sharing one scenario shape.

    Measurements are drawn for every slot of every robot whether or not the
    observation graph contains the edge, so the noise a run sees does not
    depend on its graph; ``mask`` marks the slots that are actually measured.
    """

    configs: list
    truth: np.ndarray          # (B, T + 1, N, 3) as [theta, x, y]
    v: np.ndarray              # (B, T, N) measured forward speed
    omega: np.ndarray          # (B, T, N) measured turn rate
    z: np.ndarray              # (B, T, N, S, 2) relative-position measurements
    R: np.ndarray              # noise covariances, (N, S, 2, 2) or (B, T, N, S, 2, 2)
    mask: np.ndarray           # (B, N, S) measured slots
    gs_links: np.ndarray       # (B, T, N, N) delivered links [sender, receiver], communication graph
    ls_links: np.ndarray       # (B, T, N, N) delivered links available to LS algorithms
    obs_graphs: list
    comm_graphs: list
    layout: SlotLayout

    @property
    def n_runs(self) -> int:
        return self.truth.shape[0]

    @property
    def steps(self) -> int:
        return self.v.shape[1]

    def digest(self, run: int = 0) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.truth[run]).tobytes()).hexdigest()

    def noise_at(self, k: int) -> np.ndarray:
        return self.R[:, k] if self.R.ndim == 6 else self.R[None]

    def inputs(self, run: int, k: int) -> list[OdometryInput]:
        dt = self.configs[run].dt
        return [OdometryInput(a, b, dt) for a, b in zip(self.v[run, k], self.omega[run, k])]

    def batches(self, run: int, k: int) -> dict[int, list]:
        """Measurements of step ``k`` (0-based) as per-robot lists."""
        lay = self.layout
        R = self.noise_at(k)[0 if self.R.ndim == 4 else run]
        t = (k + 1) * self.configs[run].dt
        out: dict[int, list] = {}
        for i in range(lay.n):
            for s in np.flatnonzero(self.mask[run, i]):
                tr = lay.target_robot[i, s]
                target = lay.landmark_ids[s - lay.n_rel] if tr < 0 else int(tr) + 1
                out.setdefault(i + 1, []).append(
                    Measurement(i + 1, target, RELATIVE_XY, self.z[run, k, i, s], R[i, s], t))
        return out

    def links(self, run: int, k: int, algorithm: str = "GS-CI") -> frozenset:
        arr = (self.gs_links if algorithm == "GS-CI" else self.ls_links)[run, k]
        return frozenset((int(a) + 1, int(b) + 1) for a, b in zip(*np.nonzero(arr)))


SHAPE_FIELDS = ("n_robots", "landmarks", "noise", "ci_weights", "self_weight", "dt", "steps",
                "measurement", "init_pos_var", "init_theta_var", "other_mode", "gs_fusion")


def shape_key(config: ScenarioConfig) -> str:
    """Configs with equal keys can be stepped together in one batch."""
    d = config.to_dict()
    return json.dumps({k: d[k] for k in SHAPE_FIELDS}, sort_keys=True)


def _slot_mask(layout: SlotLayout, obs_graph: TopologyGraph) -> np.ndarray:
    mask = np.zeros((layout.n, layout.n_slots), dtype=bool)
    for a, b in obs_graph.edges:
        if is_landmark(a):
            continue
        mask[a - 1, layout.slot(a, b)] = True
    return mask


def _allowed(graph: TopologyGraph, n: int) -> np.ndarray:
    arr = np.zeros((n, n), dtype=bool)
    for a, b in graph.edges:
        if not (is_landmark(a) or is_landmark(b)):
            arr[a - 1, b - 1] = True
    return arr


def generate_worlds(configs: Sequence[ScenarioConfig]) -> World:
    configs = list(configs)
    if not configs:
        raise ConfigError("no scenarios to generate")
    keys = {shape_key(c) for c in configs}
    if len(keys) != 1:
        raise ConfigError("scenarios in one batch must share their shape")
    c0 = configs[0]
    n, T, dt = c0.n_robots, c0.steps, c0.dt
    layout = SlotLayout(n, c0.landmarks)
    S = layout.n_slots
    B = len(configs)
    noise = c0.noise

    truth0 = np.empty((B, n, 3))
    v_true = np.empty((B, T, n))
    om_true = np.empty((B, T, n))
    w = np.empty((B, T, n, 2))
    raw = np.empty((B, T, n, S, 2))
    U = np.empty((B, T, n, n))
    mask = np.empty((B, n, S), dtype=bool)
    gs_ok = np.empty((B, T, n, n), dtype=bool)
    ls_ok = np.empty((B, T, n, n), dtype=bool)
    obs_graphs, comm_graphs = [], []
    times = dt * np.arange(1, T + 1)
    for b, c in enumerate(configs):
        obs_graph, comm_graph = resolve_graphs(c)
        obs_graphs.append(obs_graph)
        comm_graphs.append(comm_graph)
        mask[b] = _slot_mask(layout, obs_graph)
        truth0[b] = [p.as_vector() for p in initial_poses(c)]
        rng = stream(c.seed, TRUTH, c.graph_index, 1)
        v_true[b] = rng.uniform(*c.velocity_range, size=(T, n))
        om_true[b] = rng.uniform(*c.omega_range, size=(T, n))
        w[b] = rng.standard_normal((T, n, 2))
        raw[b] = stream(c.seed, MEASUREMENT, c.graph_index).standard_normal((T, n, S, 2))
        U[b] = stream(c.seed, LINK, c.graph_index).random((T, n, n))
        up = np.array([not in_blackout(t, c.comm_blackouts) for t in times])
        delivered = (U[b] >= c.failure_rho) & up[:, None, None]
        gs_ok[b] = delivered & _allowed(comm_graph, n)
        ls_graph = complete_graph(n) if c.ls_comm == "complete" else comm_graph
        ls_ok[b] = delivered & _allowed(ls_graph, n)

    # truth: heading integrates the turn rate, position moves along the previous heading
    theta = truth0[:, None, :, 0] + np.concatenate(
        [np.zeros((B, 1, n)), np.cumsum(om_true * dt, axis=1)], axis=1)
    step = v_true * dt
    dx = np.cumsum(step * np.cos(theta[:, :-1]), axis=1)
    dy = np.cumsum(step * np.sin(theta[:, :-1]), axis=1)
    truth = np.empty((B, T + 1, n, 3))
    truth[..., 0] = wrap_angle(theta)
    truth[:, 0, :, 1:] = truth0[..., 1:]
    truth[:, 1:, :, 1] = truth0[:, None, :, 1] + dx
    truth[:, 1:, :, 2] = truth0[:, None, :, 2] + dy

    Lw = psd_sqrt(noise.Q_w)
    w = w @ Lw.T
    v_meas = v_true + w[..., 0]
    om_meas = om_true + w[..., 1]

    pos = truth[:, 1:, :, 1:3]                                    # (B, T, N, 2)
    tp = np.empty((B, T, n, S, 2))
    tp[..., :layout.n_rel, :] = pos[:, :, layout.target_robot[:, :layout.n_rel]]
    tp[..., layout.n_rel:, :] = layout.landmark_pos
    d = tp - pos[..., None, :]
    th = truth[:, 1:, :, 0][..., None]
    is_lm = layout.target_robot < 0
    if c0.measurement == RELATIVE_XY:
        R = np.where(is_lm[..., None, None], noise.R_landmark, noise.R_relative)
        L = np.where(is_lm[..., None, None], psd_sqrt(noise.R_landmark), psd_sqrt(noise.R_relative))
        c, s = np.cos(th), np.sin(th)
        z = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], -1)
        z = z + np.einsum("nsxy,btnsy->btnsx", L, raw)
    else:
        nz = raw @ psd_sqrt(noise.R_bearing_range).T
        r = np.hypot(d[..., 0], d[..., 1])
        if np.any((r < 1e-9) & mask[:, None]):
            raise CoincidentPoints("observer and target coincide")
        phi = wrap_angle(np.arctan2(d[..., 1], d[..., 0]) - th + nz[..., 0])
        rng_ = np.maximum(r + nz[..., 1], 0.0)
        z = rng_[..., None] * np.stack([np.cos(phi), np.sin(phi)], -1)
        J = np.empty(phi.shape + (2, 2))
        J[..., 0, 0] = -rng_ * np.sin(phi)
        J[..., 0, 1] = np.cos(phi)
        J[..., 1, 0] = rng_ * np.cos(phi)
        J[..., 1, 1] = np.sin(phi)
        R = J @ noise.R_bearing_range @ np.swapaxes(J, -1, -2)
        R = 0.5 * (R + np.swapaxes(R, -1, -2))
        low = np.linalg.eigvalsh(R)[..., 0] < RANGE_PSD_FLOOR
        R = R + np.where(low[..., None, None], RANGE_PSD_FLOOR * np.eye(2), 0.0)
    return World(configs, truth, v_meas, om_meas, z, R, mask, gs_ok, ls_ok,
                 obs_graphs, comm_graphs, layout)


def generate_world(config: ScenarioConfig) -> World:
    return generate_worlds([config])


# --- metrics ---------------------------------------------------------------------------

def compute_rmse(estimates, truth, mode: str = VERBATIM) -> float:
    """Team position error.

    ``verbatim`` is sqrt(mean_i ||e_i||), the printed form, which takes the
    root of the mean norm; ``conventional`` is sqrt(mean_i ||e_i||^2).
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise LengthMismatch(f"estimates {est.shape} vs truth {tru.shape}")
    norms = np.linalg.norm(est.reshape(-1, 2) - tru.reshape(-1, 2), axis=1)
    if mode == VERBATIM:
        return float(np.sqrt(norms.mean()))
    if mode == CONVENTIONAL:
        return float(np.sqrt(np.mean(norms**2)))
    raise ValueError(f"unknown rmse mode {mode!r}")


def compute_rmte(covariances) -> float:
    covs = np.asarray(covariances, dtype=float).reshape(-1, 2, 2)
    return float(np.sqrt(np.trace(covs, axis1=1, axis2=2).mean()))


def nees(error: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Normalized estimation error squared for stacked (..., 2) errors and (..., 2, 2) covariances."""
    return np.einsum("...i,...i->...", error, np.linalg.solve(cov, error[..., None])[..., 0])


def anees_bound(runs: int, dof: int = 2, prob: float = 0.99) -> float:
    """Upper ``prob`` quantile of the NEES averaged over ``runs`` independent runs."""
    return float(chi2.ppf(prob, dof * runs) / runs)


@dataclass(eq=False)
class MetricSeries:
    algorithm: str
    t: np.ndarray
    rmse: np.ndarray
    rmte: np.ndarray
    errors: np.ndarray | None = None      # (steps, N, 2) own-position errors
    covs: np.ndarray | None = None        # (steps, N, 2, 2) own-position covariances

    def __post_init__(self):
        if not (len(self.t) == len(self.rmse) == len(self.rmte)):
            raise LengthMismatch("metric arrays differ in length")

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    def window(self, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray]:
        sel = (self.t >= t0) & (self.t < t1)
        return self.t[sel], self.rmse[sel]


def window_slope(t: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of y over t."""
    if len(t) < 2:
        raise ValueError("need at least two points for a slope")
    return float(np.polyfit(t, y, 1)[0])


# --- algorithms -------------------------------------------------------------------------

def make_team(name: str, config: ScenarioConfig, poses):
    """Team filter for one run (a list of poses) or a batch (a list of such lists)."""
    kw = dict(init_pos_var=config.init_pos_var, init_theta_var=config.init_theta_var)
    args = (config.n_robots, config.landmarks, config.noise, poses)
    if name == "LS-Cen":
        return LSCenTeam(*args, **kw)
    if name == "LS-CI":
        return LSCITeam(*args, **kw)
    if name == "LS-SCI":
        return LSSCITeam(*args, **kw)
    if name == "LS-BDA":
        return LSBDATeam(*args, **kw)
    if name == "GS-CI":
        return GSCITeam(*args, self_weight=config.self_weight, weight_strategy=config.ci_weights,
                        fusion=config.gs_fusion, other_mode=config.other_mode, **kw)
    raise ConfigError(f"unknown algorithm {name!r}")


@dataclass(eq=False)
class ExperimentResult:
    config: ScenarioConfig
    series: dict
    truth_digest: str

    def rows(self) -> list[tuple]:
        out = []
        c = self.config
        for name, s in self.series.items():
            for t, e, u in zip(s.t, s.rmse, s.rmte):
                out.append((t, name, e, u, c.failure_rho, c.comm_density, c.seed))
        return out


def run_on_world(world: World, name: str, record: bool = False) -> list[MetricSeries]:
    """Run one algorithm on every run of ``world``; one series per run."""
    c0 = world.configs[0]
    poses = [[RobotPose.from_vector(q) for q in world.truth[b, 0]] for b in range(world.n_runs)]
    team = make_team(name, c0, poses)
    links = world.gs_links if name == "GS-CI" else world.ls_links
    B, T, n = world.n_runs, world.steps, c0.n_robots
    modes = np.array([c.rmse == VERBATIM for c in world.configs])
    rmse = np.empty((B, T))
    rmte = np.empty((B, T))
    errs = np.empty((B, T, n, 2)) if record else None
    covs = np.empty((B, T, n, 2, 2)) if record else None
    for k in range(T):
        team.step_arrays(world.v[:, k], world.omega[:, k], c0.dt, world.z[:, k], world.mask,
                         world.noise_at(k), links[:, k])
        means, cv = team.position_estimates()
        e = means - world.truth[:, k + 1, :, 1:3]
        norms = np.hypot(e[..., 0], e[..., 1])
        rmse[:, k] = np.where(modes, np.sqrt(norms.mean(axis=1)), np.sqrt((norms**2).mean(axis=1)))
        rmte[:, k] = np.sqrt(np.trace(cv, axis1=-2, axis2=-1).mean(axis=1))
        if record:
            errs[:, k] = e
            covs[:, k] = cv
    t = c0.dt * np.arange(1, T + 1)
    return [MetricSeries(name, t, rmse[b], rmte[b], errs[b] if record else None,
                         covs[b] if record else None) for b in range(B)]


def _check_algorithms(algorithms):
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {a!r}")


def run_batch(configs: Sequence[ScenarioConfig], algorithms: Sequence[str] = ALGORITHMS,
              record: bool = False) -> list[ExperimentResult]:
    """Run every algorithm on the worlds of several same-shape scenarios at once.

    Each run's result equals what ``run_experiment`` gives for it alone.
    """
    _check_algorithms(algorithms)
    world = generate_worlds(configs)
    per_alg = {a: run_on_world(world, a, record) for a in algorithms}
    return [ExperimentResult(c, {a: per_alg[a][b] for a in algorithms}, world.digest(b))
            for b, c in enumerate(world.configs)]


def run_experiment(config: ScenarioConfig, algorithms: Sequence[str] = ALGORITHMS,
                   record: bool = False) -> ExperimentResult:
    """Run every algorithm on one synthesized world (paired comparison)."""
    return run_batch([config], algorithms, record)[0]


# --- CSV -------------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


def format_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    text = format_csv(header, rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode()).hexdigest()


# --- sweeps ----------------------------------------------------------------------------

SWEEP_HEADER = ("param", "value", "algorithm", "runs", "rmse_mean", "rmse_std",
                "rmse_final_mean", "rmse_final_std", "rmte_mean", "rmte_std")


def sweep_configs(base: ScenarioConfig, param: str, values: Sequence[float], graphs: int = 1,
                  seeds: Sequence[int] | None = None) -> list[tuple[float, ScenarioConfig]]:
    """One config per (value, graph index, seed)."""
    if not values:
        raise ConfigError("empty sweep value list")
    if param not in ("rho", "density"):
        raise ConfigError(f"cannot sweep {param!r}")
    seeds = [base.seed] if seeds is None else list(seeds)
    out = []
    for v in values:
        v = float(v)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{param} value {v} outside [0, 1]")
        for s in seeds:
            for g in range(graphs):
                if param == "rho":
                    c = base.with_(failure_rho=v, seed=s, graph_index=g)
                else:
                    c = base.with_(comm_graph=GraphSpec(density=v), seed=s, graph_index=g)
                out.append((v, c))
    return out


def _summaries(args):
    configs, algorithms = args
    out = []
    for res in run_batch(configs, algorithms):
        out.append({a: (s.mean_rmse, float(s.rmse[-1]), float(np.mean(s.rmte)))
                    for a, s in res.series.items()})
    return out


def _chunks(items: list, n_chunks: int) -> list[list]:
    size = -(-len(items) // max(n_chunks, 1))
    return [items[k:k + size] for k in range(0, len(items), size)]


def run_sweep(base: ScenarioConfig, param: str, values: Sequence[float], graphs: int = 1,
              seeds: Sequence[int] | None = None, algorithms: Sequence[str] = ALGORITHMS,
              jobs: int = 1) -> tuple[list[tuple], dict]:
    """Paired sweep; returns aggregate rows and the raw per-run summaries.

    All runs are stepped together as one batch (split over ``jobs``
    processes).  Raw results are keyed by (value, seed, graph index), so
    neither the split nor the completion order changes the output.
    """
    _check_algorithms(algorithms)
    cfgs = sweep_configs(base, param, values, graphs, seeds)
    chunks = _chunks(cfgs, jobs)
    tasks = [([c for _, c in ch], tuple(algorithms)) for ch in chunks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = [r for part in ex.map(_summaries, tasks) for r in part]
    else:
        results = [r for t in tasks for r in _summaries(t)]
    raw = {(v, c.seed, c.graph_index): r for (v, c), r in zip(cfgs, results)}
    rows = []
    for v in dict.fromkeys(float(x) for x in values):
        runs = [r for (vv, _, _), r in sorted(raw.items()) if vv == v]
        for a in algorithms:
            m = np.array([r[a] for r in runs])
            rows.append((param, v, a, len(runs), m[:, 0].mean(), m[:, 0].std(ddof=0),
                         m[:, 1].mean(), m[:, 1].std(ddof=0), m[:, 2].mean(), m[:, 2].std(ddof=0)))
    return rows, raw


# --- position-only boundedness analysis ----------------------------------------------------

@dataclass(eq=False)
class AnalysisResult:
    trace_phi: np.ndarray      # (steps, N) trace of each robot's covariance
    trace_psi: np.ndarray      # (steps, N) trace of each robot's upper bound
    min_gap: np.ndarray        # (steps, N) smallest eigenvalue of Psi - Phi
    phi: list                  # final PositionState per robot
    psi: list                  # final UpperBoundState per robot


def run_analysis(obs_graph: TopologyGraph, comm_graph: TopologyGraph, steps: int, seed: int = 0,
                 noise: NoiseConfig | None = None, dt: float = 1.0,
                 landmarks: Mapping | None = None, p_max: float = 50.0, init_var: float = 1e-9,
                 init_spread: float = 5.0, velocity_range=(-0.09, 0.09),
                 omega_range=(-0.1, 0.1), check_bound: bool = True,
                 arena: float | None = 10.0, motion: str = "random",
                 turn_rate: float = 0.01) -> AnalysisResult:
    """Position-only GS-CI with externally supplied orientation, run in lockstep
    with its covariance upper bound.

    Orientation estimates are the true headings plus N(0, sigma_theta^2) noise.
    ``motion="random"`` draws fresh inputs every tick and reflects robots off the
    walls of a square of half-width ``arena``.  ``motion="formation"`` drives every
    robot around the first landmark at the common ``turn_rate`` on its own radius,
    so inter-robot distances never change and the covariance can settle.
    Raises BoundViolation if a position leaves the workspace radius ``p_max``,
    since the observation-noise bound relies on it.
    """
    noise = noise or NoiseConfig()
    landmarks = landmarks or {LANDMARK: (0.0, 0.0)}
    n = len(obs_graph.robots)
    dim = 2 * n
    d_max = 2.0 * p_max

    rng_truth = stream(seed, TRUTH, 0, 1)
    rng_meas = stream(seed, MEASUREMENT, 0)
    init = stream(seed, TRUTH, 0, 0)
    pos = init.uniform(-init_spread, init_spread, size=(n, 2))
    th = init.uniform(-np.pi, np.pi, size=n)
    if motion == "formation":
        centre = np.asarray(next(iter(landmarks.values())), dtype=float)
        radius = np.linalg.norm(pos, axis=1) + 1.0
        phase = np.arctan2(pos[:, 1], pos[:, 0])
        pos = centre + radius[:, None] * np.stack([np.cos(phase), np.sin(phase)], axis=1)
        th = phase + 0.5 * np.pi + 0.5 * turn_rate * dt
        v_form = 2.0 * radius * np.sin(0.5 * turn_rate * dt) / dt
    elif motion != "random":
        raise ConfigError(f"unknown motion {motion!r}")
    truth = [RobotPose(t, p) for t, p in zip(th, pos)]

    mean0 = pos.reshape(-1).copy()
    phi = [PositionState(i, n, mean0.copy(), init_var * np.eye(dim)) for i in range(1, n + 1)]
    q = q_check_matrix(n, dt, noise.sigma_u_sq, noise.u_max, noise.sigma_theta_sq)
    targets = {i: sorted((b for a, b in obs_graph.edges if a == i), key=lambda x: (is_landmark(x), str(x)))
               for i in range(1, n + 1)}
    senders = {i: sorted(comm_graph.in_neighbors(i)) for i in range(1, n + 1)}
    h_chk = {i: h_check(i, targets[i], n) for i in targets}
    r_chk = {}
    for i in targets:
        covs = [noise.R_landmark if is_landmark(t) else noise.R_relative for t in targets[i]]
        r_chk[i] = r_check_matrix(len(targets[i]), noise.sigma_theta_sq, d_max, covs)
    psi = [UpperBoundState(init_var * np.eye(dim), q, r_chk) for _ in range(n)]

    trace_phi = np.empty((steps, n))
    trace_psi = np.empty((steps, n))
    gap = np.empty((steps, n))
    sd_th = np.sqrt(noise.sigma_theta_sq)
    Lw = np.sqrt(noise.Q_w[0, 0])
    for k in range(steps):
        v = rng_truth.uniform(*velocity_range, size=n)
        om = rng_truth.uniform(*omega_range, size=n)
        if motion == "formation":
            v, om = v_form, np.full(n, turn_rate)
        v_meas = v + Lw * rng_truth.standard_normal(n)
        theta_hat = np.array([p.theta for p in truth]) + sd_th * rng_truth.standard_normal(n)
        # orientation error at propagation and at observation are separate draws
        new = []
        for i, p in enumerate(truth):
            c, s = np.cos(p.theta), np.sin(p.theta)
            new.append(RobotPose(p.theta + om[i] * dt, p.position + v[i] * dt * np.array([c, s])))
        truth = new if arena is None or motion != "random" else [reflect_in_arena(p, arena) for p in new]
        for i in range(n):
            if np.linalg.norm(truth[i].position) > p_max:
                raise BoundViolation(f"robot {i + 1} left the workspace radius {p_max}")

        phi = [analysis_propagate(phi[i], theta_hat[i], v_meas[i], dt, noise) for i in range(n)]
        psi = [psi_propagate(u) for u in psi]

        theta_obs = np.array([p.theta for p in truth]) + sd_th * rng_truth.standard_normal(n)
        for i in range(1, n + 1):
            if not targets[i]:
                continue
            batch = []
            for t in targets[i]:
                tp = np.asarray(landmarks[t], dtype=float) if is_landmark(t) else truth[t - 1].position
                R = noise.R_landmark if is_landmark(t) else noise.R_relative
                vv = psd_sqrt(R) @ rng_meas.standard_normal(2)
                batch.append(relative_observation(truth[i - 1], tp, vv, observer_id=i, target_id=t,
                                                  noise_cov=R))
            st = phi[i - 1]
            if check_bound:
                for t in [i] + [t for t in targets[i] if not is_landmark(t)]:
                    if np.linalg.norm(st.mean[st.block(t)]) > p_max:
                        raise BoundViolation(f"estimate of robot {t} left the workspace radius")
                H, _, R_eff = analysis_observation_matrices(st, batch, theta_obs[i - 1], landmarks,
                                                            noise.sigma_theta_sq)
                xi = np.kron(np.eye(len(batch)), rotation(theta_obs[i - 1]))
                check_r_bound(r_chk[i], xi, R_eff)
            phi[i - 1] = analysis_observe(st, batch, theta_obs[i - 1], landmarks, noise.sigma_theta_sq)
            psi[i - 1] = psi_observe(psi[i - 1], h_chk[i], r_chk[i])

        phi_snap, psi_snap = list(phi), list(psi)
        for i in range(1, n + 1):
            js = senders[i]
            if not js:
                continue
            w = default_ci_weights(len(js))
            phi[i - 1] = analysis_communicate(phi_snap[i - 1], [phi_snap[j - 1] for j in js], w)
            psi[i - 1] = psi_communicate([psi_snap[i - 1]] + [psi_snap[j - 1] for j in js], w)

        for i in range(n):
            trace_phi[k, i] = np.trace(phi[i].cov)
            trace_psi[k, i] = np.trace(psi[i].psi)
            gap[k, i] = np.linalg.eigvalsh(0.5 * ((psi[i].psi - phi[i].cov) + (psi[i].psi - phi[i].cov).T))[0]
    return AnalysisResult(trace_phi, trace_psi, gap, phi, psi)


def reflect_in_arena(pose: RobotPose, half_width: float) -> RobotPose:
    """Mirror a pose that crossed the walls of the square [-a, a]^2 back inside."""
    a = half_width
    x, y = pose.position
    th = pose.theta
    if abs(x) > a:
        x = np.sign(x) * 2 * a - x
        th = np.pi - th
    if abs(y) > a:
        y = np.sign(y) * 2 * a - y
        th = -th
    return RobotPose(th, np.array([x, y]))


def unanchored_trace(state: PositionState, robots: Iterable[int]) -> float:
    return float(sum(np.trace(state.cov[state.block(j), state.block(j)]) for j in robots))


def plateau_variation(trace: np.ndarray, frac: float = 0.05) -> float:
    """(max - min) / mean over the last ``frac`` of the series."""
    tail = trace[-max(1, int(round(frac * len(trace)))):]
    return float((tail.max() - tail.min()) / tail.mean())
