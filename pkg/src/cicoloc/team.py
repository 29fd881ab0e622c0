"""Common surface for team-level estimators and their link requirements.

Every algorithm is driven by the same tick: ``propagate`` with each robot's
odometry, ``observe`` with each robot's measurements and the set of links
delivered this tick, then ``communicate`` with the same link set.
A link is an ordered pair ``(sender, receiver)`` of 1-based robot ids.

Team filters carry a leading run axis so that many independent runs of the
same scenario shape can be stepped together; a single run is a batch of
one.  Measurements are laid out in fixed slots: robot i has one slot per
other robot (ascending id) followed by one per landmark (sorted name).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import UnknownTarget
from .models import BEARING_RANGE, Measurement, OdometryInput, bearing_range_to_relative

ALL_TO_ALL = "all_to_all"
BIDIRECTIONAL = "bidirectional_pair"
UNIDIRECTIONAL = "unidirectional"
NONE = "none"

RELATIVE_OBSERVATION = "relative_observation"
BROADCAST = "broadcast"


@dataclass(frozen=True)
class CommRequirement:
    algorithm: str
    links_needed: str


REQUIREMENTS = {
    "LS-Cen": CommRequirement("LS-Cen", ALL_TO_ALL),
    "LS-CI": CommRequirement("LS-CI", UNIDIRECTIONAL),
    "LS-SCI": CommRequirement("LS-SCI", UNIDIRECTIONAL),
    "LS-BDA": CommRequirement("LS-BDA", BIDIRECTIONAL),
    "GS-CI": CommRequirement("GS-CI", NONE),
}


def handshake_links(algorithm: str, observer: int, target: int, n_robots: int) -> frozenset:
    """Links that must all be delivered for a relative observation to be fused."""
    need = REQUIREMENTS[algorithm].links_needed
    if need == ALL_TO_ALL:
        ids = range(1, n_robots + 1)
        return frozenset((a, b) for a in ids for b in ids if a != b)
    if need == BIDIRECTIONAL:
        return frozenset({(target, observer), (observer, target)})
    if need == UNIDIRECTIONAL:
        return frozenset({(target, observer)})
    return frozenset()


def comm_cost(algorithm: str, event: str = RELATIVE_OBSERVATION, n_robots: int = 5) -> int:
    """Point-to-point messages consumed by one event."""
    if event == BROADCAST:
        # GS-CI sends its estimate once per outgoing link; LS algorithms never broadcast
        return 1 if algorithm == "GS-CI" else 0
    if event != RELATIVE_OBSERVATION:
        raise ValueError(f"unknown event {event!r}")
    return len(handshake_links(algorithm, 1, 2, n_robots))


def handshake_ok(algorithm: str, observer: int, target: int, n_robots: int,
                 links: frozenset | set) -> bool:
    return handshake_links(algorithm, observer, target, n_robots) <= links


def handshake_mask(algorithm: str, links: np.ndarray) -> np.ndarray:
    """Vectorized handshake test.

    ``links`` is (B, N, N) boolean indexed [sender, receiver] (0-based).
    Returns (B, N, N) indexed [observer, target]: True where a relative
    observation of target by observer may be fused.
    """
    need = REQUIREMENTS[algorithm].links_needed
    B, N, _ = links.shape
    if need == ALL_TO_ALL:
        off = ~np.eye(N, dtype=bool)
        full = np.all(links | ~off, axis=(1, 2))
        return np.broadcast_to(full[:, None, None], (B, N, N)).copy()
    to_observer = np.swapaxes(links, 1, 2)            # [observer, target] <- link (target, observer)
    if need == UNIDIRECTIONAL:
        return to_observer.copy()
    if need == BIDIRECTIONAL:
        return to_observer & links
    return np.ones((B, N, N), dtype=bool)


def links_to_array(links: Iterable, n_robots: int) -> np.ndarray:
    arr = np.zeros((n_robots, n_robots), dtype=bool)
    for a, b in links:
        arr[a - 1, b - 1] = True
    return arr


class SlotLayout:
    """Fixed measurement slots: other robots first, then landmarks."""

    def __init__(self, n_robots: int, landmarks: Mapping[str, Sequence[float]]):
        self.n = n_robots
        self.landmark_ids = sorted(landmarks)
        self.landmark_pos = np.array([landmarks[k] for k in self.landmark_ids], dtype=float).reshape(-1, 2)
        self.n_rel = n_robots - 1
        self.n_slots = self.n_rel + len(self.landmark_ids)
        # target robot (0-based) per slot, -1 for landmark slots
        self.target_robot = np.full((n_robots, self.n_slots), -1, dtype=int)
        for i in range(n_robots):
            others = [j for j in range(n_robots) if j != i]
            self.target_robot[i, :self.n_rel] = others
        self._lm_index = {k: n for n, k in enumerate(self.landmark_ids)}

    def slot(self, observer: int, target) -> int:
        """Slot of ``target`` for 1-based ``observer``."""
        if isinstance(target, str):
            if target not in self._lm_index:
                raise UnknownTarget(target)
            return self.n_rel + self._lm_index[target]
        t = int(target)
        if not 1 <= t <= self.n or t == observer:
            raise UnknownTarget(target)
        return t - 1 if t < observer else t - 2

    def pack(self, batches: Mapping[int, Sequence[Measurement]]):
        """Convert measurement lists into slot arrays for a single run.

        Bearing/range measurements are converted to relative position first.
        When a robot measures the same target twice in one tick the extra
        measurements go into additional rounds, applied one after another.
        Returns a list of (z, mask, noise) with shapes (1, N, S, 2),
        (1, N, S) and (1, N, S, 2, 2).
        """
        rounds: list = []
        for observer in sorted(batches):
            if not 1 <= observer <= self.n:
                raise UnknownTarget(observer)
            used: dict[int, int] = {}
            for m in batches[observer]:
                if m.observer != observer:
                    raise ValueError(f"measurement by robot {m.observer} filed under robot {observer}")
                if m.kind == BEARING_RANGE:
                    m = bearing_range_to_relative(m)
                s = self.slot(observer, m.target)
                r = used.get(s, 0)
                used[s] = r + 1
                while len(rounds) <= r:
                    rounds.append((np.zeros((1, self.n, self.n_slots, 2)),
                                   np.zeros((1, self.n, self.n_slots), dtype=bool),
                                   np.tile(np.eye(2), (1, self.n, self.n_slots, 1, 1))))
                z, mask, R = rounds[r]
                z[0, observer - 1, s] = m.value
                mask[0, observer - 1, s] = True
                R[0, observer - 1, s] = m.noise_cov
        return rounds

    def target_positions(self, own_positions: np.ndarray) -> np.ndarray:
        """Target positions per slot from per-robot position estimates.

        ``own_positions`` is (B, N, 2) (what each observer believes about
        every robot is algorithm specific; this helper is for local-state
        algorithms where the target's own estimate is used).  Returns
        (B, N, S, 2).
        """
        B = own_positions.shape[0]
        out = np.empty((B, self.n, self.n_slots, 2))
        out[:, :, :self.n_rel] = own_positions[:, self.target_robot[:, :self.n_rel]]
        out[:, :, self.n_rel:] = self.landmark_pos[None, None]
        return out


def inputs_to_arrays(inputs: Sequence[OdometryInput]) -> tuple[np.ndarray, np.ndarray, float]:
    dts = {u.dt for u in inputs}
    if len(dts) != 1:
        raise ValueError("all robots must share the tick length")
    v = np.array([[u.v for u in inputs]])
    om = np.array([[u.omega for u in inputs]])
    return v, om, dts.pop()


class TeamFilter:
    """Base class: one estimator per robot, for B independent runs at once."""

    name = ""

    def __init__(self, n_robots: int, landmarks: Mapping[str, Sequence[float]], n_runs: int = 1):
        self.n = n_robots
        self.B = n_runs
        self.landmarks = {k: np.asarray(v, dtype=float) for k, v in landmarks.items()}
        self.layout = SlotLayout(n_robots, self.landmarks)

    # array interface ------------------------------------------------------------------

    def propagate_arrays(self, v: np.ndarray, omega: np.ndarray, dt: float) -> None:
        raise NotImplementedError

    def observe_arrays(self, z: np.ndarray, mask: np.ndarray, R: np.ndarray,
                       links: np.ndarray) -> None:
        """z (B, N, S, 2); mask (B, N, S); R broadcastable to (B, N, S, 2, 2);
        links (B, N, N) boolean [sender, receiver]."""
        raise NotImplementedError

    def communicate_arrays(self, links: np.ndarray) -> None:
        pass

    def position_estimates(self) -> tuple[np.ndarray, np.ndarray]:
        """Each robot's estimate of its own position: means (B, N, 2), covariances (B, N, 2, 2)."""
        raise NotImplementedError

    # single-run interface ---------------------------------------------------------------

    def propagate(self, inputs: Sequence[OdometryInput]) -> None:
        self._require_single()
        v, om, dt = inputs_to_arrays(inputs)
        self.propagate_arrays(v, om, dt)

    def observe(self, batches: Mapping[int, Sequence[Measurement]], links: Iterable = ()) -> None:
        self._require_single()
        L = links_to_array(links, self.n)[None]
        for z, mask, R in self.layout.pack(batches):
            self.observe_arrays(z, mask, R, L)

    def communicate(self, links: Iterable = ()) -> None:
        self._require_single()
        self.communicate_arrays(links_to_array(links, self.n)[None])

    def step(self, inputs, batches, links) -> None:
        links = frozenset(links)
        self.propagate(inputs)
        self.observe(batches, links)
        self.communicate(links)

    def step_arrays(self, v, omega, dt, z, mask, R, links) -> None:
        self.propagate_arrays(v, omega, dt)
        self.observe_arrays(z, mask, R, links)
        self.communicate_arrays(links)

    def _require_single(self):
        if self.B != 1:
            raise ValueError("the measurement-list interface drives a single run; use the array interface")
