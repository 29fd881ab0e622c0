"""Observation/communication graphs, the boundedness criterion, and the
covariance upper-bound recursion.

Robots are 1-based integers; landmarks are strings (``"L"``, ``"L6"``...).
An observation edge ``(i, j)`` means robot i observes j.  A communication
edge ``(j, i)`` means robot j sends its estimate to robot i.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BoundViolation, DimensionMismatch, UnknownNode
from .estimation import CIWeights, ci_fuse, from_information, GaussianEstimate, symmetrize

LANDMARK = "L"


def is_landmark(node) -> bool:
    return isinstance(node, str)


def _node_key(node):
    # robots first in numeric order, then landmarks by name
    return (1, node) if is_landmark(node) else (0, node)


@dataclass(frozen=True)
class TopologyGraph:
    nodes: frozenset
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        nodes = frozenset(self.nodes)
        edges = frozenset((a, b) for a, b in self.edges)
        for a, b in edges:
            if a == b:
                raise ValueError(f"self-loop on {a!r}")
            if a not in nodes or b not in nodes:
                raise UnknownNode(f"edge {(a, b)} references a node outside the graph")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def over(cls, n_robots: int, edges: Iterable = (), landmarks: Iterable[str] = (LANDMARK,)):
        nodes = set(range(1, n_robots + 1)) | set(landmarks)
        return cls(frozenset(nodes), frozenset(edges))

    @property
    def robots(self) -> list[int]:
        return sorted(n for n in self.nodes if not is_landmark(n))

    @property
    def landmarks(self) -> list[str]:
        return sorted(n for n in self.nodes if is_landmark(n))

    def sorted_nodes(self) -> list:
        return sorted(self.nodes, key=_node_key)

    def sorted_edges(self) -> list:
        return sorted(self.edges, key=lambda e: (_node_key(e[0]), _node_key(e[1])))

    def in_neighbors(self, i) -> set:
        return {a for a, b in self.edges if b == i}

    def out_edges(self, i) -> frozenset:
        return frozenset(e for e in self.edges if e[0] == i)

    def with_edges(self, edges: Iterable) -> "TopologyGraph":
        return TopologyGraph(self.nodes, self.edges | frozenset(edges))

    def without_edges(self, edges: Iterable) -> "TopologyGraph":
        return TopologyGraph(self.nodes, self.edges - frozenset(edges))


def split_by_observer(obs: TopologyGraph) -> dict[int, TopologyGraph]:
    """Per-robot observation graphs from a team-wide one."""
    return {i: TopologyGraph(obs.nodes, obs.out_edges(i)) for i in obs.robots}


def super_neighborhood(gc: TopologyGraph, i, inclusive: bool = False) -> set:
    """Robots with a directed communication path to ``i``."""
    if i not in gc.nodes:
        raise UnknownNode(i)
    preds: dict = {}
    for a, b in gc.edges:
        preds.setdefault(b, set()).add(a)
    seen = {i}
    queue = deque([i])
    while queue:
        v = queue.popleft()
        for u in preds.get(v, ()):
            if u not in seen:
                seen.add(u)
                queue.append(u)
    if not inclusive:
        seen.discard(i)
    return seen


def is_weakly_connected(g: TopologyGraph) -> bool:
    if not g.nodes:
        raise ValueError("empty graph")
    adj: dict = {n: set() for n in g.nodes}
    for a, b in g.edges:
        adj[a].add(b)
        adj[b].add(a)
    start = next(iter(g.nodes))
    seen = {start}
    queue = deque([start])
    while queue:
        for u in adj[queue.popleft()]:
            if u not in seen:
                seen.add(u)
                queue.append(u)
    return len(seen) == len(g.nodes)


def merged_observation_graph(obs_graphs: Mapping[int, TopologyGraph], gc: TopologyGraph,
                             i: int) -> TopologyGraph:
    members = super_neighborhood(gc, i, inclusive=True)
    nodes = set(gc.nodes)
    edges = set()
    for j, g in obs_graphs.items():
        nodes |= g.nodes
        if j in members:
            edges |= g.edges
    return TopologyGraph(frozenset(nodes), frozenset(edges))


def boundedness_predicate(obs_graphs: Mapping[int, TopologyGraph], gc: TopologyGraph,
                          i: int) -> tuple[bool, TopologyGraph]:
    """Sufficient condition for robot i's position covariance to stay bounded.

    Unions the observation edges of every robot that can reach ``i`` through
    communication (``i`` included) and tests weak connectivity over all
    robots and landmarks.
    """
    merged = merged_observation_graph(obs_graphs, gc, i)
    return is_weakly_connected(merged), merged


def incidence_matrix(g: TopologyGraph) -> np.ndarray:
    """Node-by-edge incidence matrix: -1 at the edge's tail, +1 at its head."""
    nodes = g.sorted_nodes()
    row = {n: k for k, n in enumerate(nodes)}
    edges = g.sorted_edges()
    D = np.zeros((len(nodes), len(edges)))
    for c, (a, b) in enumerate(edges):
        D[row[a], c] = -1.0
        D[row[b], c] = 1.0
    return D


def incidence_reduced(g: TopologyGraph) -> np.ndarray:
    """Incidence matrix with the landmark rows removed (robot rows only).

    Without landmarks the full incidence matrix is returned.
    """
    D = incidence_matrix(g)
    if not g.landmarks:
        return D
    keep = [k for k, n in enumerate(g.sorted_nodes()) if not is_landmark(n)]
    return D[keep, :]


def incidence_full_rank(D: np.ndarray) -> bool:
    """True when every robot row is independent, i.e. all robot positions are observable."""
    if D.shape[0] == 0:
        return True
    if D.shape[1] == 0:
        return False
    return int(np.linalg.matrix_rank(D)) == D.shape[0]


# --- edge-list text format ----------------------------------------------------------

def parse_node(token: str):
    if token[0] in "Ll":
        return LANDMARK + token[1:]
    return int(token)


def parse_edge_list(text: str) -> list[tuple]:
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected two tokens, got {raw!r}")
        try:
            edges.append((parse_node(parts[0]), parse_node(parts[1])))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad node in {raw!r}") from exc
    return edges


def format_edge_list(edges: Iterable[tuple]) -> str:
    g_edges = sorted(edges, key=lambda e: (_node_key(e[0]), _node_key(e[1])))
    return "".join(f"{a} {b}\n" for a, b in g_edges)


def read_edge_list(path) -> list[tuple]:
    with open(path, encoding="utf-8") as fh:
        return parse_edge_list(fh.read())


def write_edge_list(path, edges: Iterable[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_edge_list(edges))


# --- covariance upper bound ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UpperBoundState:
    """Upper bound on one robot's position covariance, with invariant coefficients."""

    psi: np.ndarray
    q_check: np.ndarray
    r_check: Mapping[int, np.ndarray] = field(default_factory=dict)


def q_check_matrix(n_robots: int, dt: float, sigma_u_sq: float, u_max: float,
                   sigma_theta_sq: float) -> np.ndarray:
    return dt**2 * max(sigma_u_sq, u_max**2 * sigma_theta_sq) * np.eye(2 * n_robots)


def h_check(observer: int, targets: Sequence, n_robots: int) -> np.ndarray:
    """Stacked position-difference selector for one robot's observations."""
    H = np.zeros((2 * len(targets), 2 * n_robots))
    eye = np.eye(2)
    for r, t in enumerate(targets):
        rows = slice(2 * r, 2 * r + 2)
        H[rows, 2 * (observer - 1):2 * observer] = -eye
        if not is_landmark(t):
            H[rows, 2 * (t - 1):2 * t] = eye
    return H


def r_check_matrix(n_obs: int, sigma_theta_sq: float, max_distance: float,
                   noise_covs: Sequence[np.ndarray]) -> np.ndarray:
    """Isotropic noise bound valid for every orientation and every relative
    distance up to ``max_distance``.

    The orientation term contributes at most sigma_theta^2 * sum |d_j|^2, the
    measurement noise at most its largest eigenvalue.
    """
    if n_obs == 0:
        return np.zeros((0, 0))
    lam_v = max(float(np.linalg.eigvalsh(R)[-1]) for R in noise_covs)
    bound = sigma_theta_sq * n_obs * max_distance**2 + lam_v
    return bound * np.eye(2 * n_obs)


def check_r_bound(r_check: np.ndarray, rotation_block: np.ndarray, r_eff: np.ndarray,
                  tol: float = 1e-9) -> None:
    """Verify R_check^-1 <= Xi R_eff^-1 Xi^T; raises BoundViolation otherwise."""
    lhs = np.linalg.inv(r_check)
    rhs = rotation_block @ np.linalg.inv(r_eff) @ rotation_block.T
    w = np.linalg.eigvalsh(symmetrize(rhs - lhs))
    if w[0] < -tol * max(1.0, abs(w[-1])):
        raise BoundViolation(f"observation noise bound violated (eigenvalue {w[0]:.3e})")


def psi_propagate(ub: UpperBoundState) -> UpperBoundState:
    return UpperBoundState(ub.psi + ub.q_check, ub.q_check, ub.r_check)


def psi_observe(ub: UpperBoundState, H: np.ndarray, R: np.ndarray) -> UpperBoundState:
    """Psi^-1 += H^T R^-1 H, computed in covariance form so singular Psi is allowed."""
    if H.shape[0] == 0:
        return ub
    if H.shape[1] != ub.psi.shape[0] or R.shape != (H.shape[0], H.shape[0]):
        raise DimensionMismatch("observation matrices do not match the bound")
    PHt = ub.psi @ H.T
    S = H @ PHt + R
    psi = ub.psi - PHt @ np.linalg.solve(S, PHt.T)
    return UpperBoundState(symmetrize(psi), ub.q_check, ub.r_check)


def psi_communicate(ubs: Sequence[UpperBoundState], w: CIWeights | Sequence[float]) -> UpperBoundState:
    """Conventional CI over bounds; ``ubs[0]`` is the receiving robot's own bound."""
    dims = {u.psi.shape for u in ubs}
    if len(dims) != 1:
        raise DimensionMismatch("bounds of different dimension")
    if len(ubs) == 1:
        return ubs[0]
    n = ubs[0].psi.shape[0]
    ests = [GaussianEstimate.moment(np.zeros(n), u.psi) for u in ubs]
    psi = from_information(ci_fuse(ests, w)).cov
    return UpperBoundState(psi, ubs[0].q_check, ubs[0].r_check)
