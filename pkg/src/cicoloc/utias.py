"""UTIAS multi-robot cooperative localization dataset: loading, resampling,
caching and replay.

A sub-dataset directory holds whitespace-delimited text files with ``#``
comment headers::

    Barcodes.dat                 subject  barcode
    Landmark_Groundtruth.dat     subject  x  y  [x std  y std]
    Robot<i>_Odometry.dat        time  forward velocity  angular velocity
    Robot<i>_Measurement.dat     time  barcode  range  bearing
    Robot<i>_Groundtruth.dat     time  x  y  orientation

Subjects 1-5 are the robots; larger subject numbers are landmarks, named
``"L<subject>"`` here so they can sit in the same graphs as robot ids.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, EmptyWindow, MalformedLine, MissingFile
from .models import BEARING_RANGE, Measurement, NoiseConfig, RobotPose, wrap_angle
from .sim import (ALGORITHMS, LINK, VERBATIM, MetricSeries, _check_algorithms, in_blackout,
                  make_team, stream, ScenarioConfig)

N_ROBOTS = 5
DATA_ENV = "CICOLOC_UTIAS_DIR"


def landmark_name(subject: int) -> str:
    return f"L{subject}"


def _read_table(path: Path, n_cols: int, min_cols: int | None = None) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(str(path))
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) < (min_cols or n_cols):
                raise MalformedLine(path, lineno, line.rstrip("\n"))
            try:
                rows.append([float(p) for p in parts[:n_cols]])
            except ValueError:
                raise MalformedLine(path, lineno, line.rstrip("\n")) from None
    return np.array(rows, dtype=float).reshape(-1, n_cols)


def _sorted(a: np.ndarray) -> np.ndarray:
    return a[np.argsort(a[:, 0], kind="stable")]


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """Parsed sub-dataset.

    ``odometry[i]`` rows are (t, v, omega); ``measurements[i]`` rows are
    (t, subject, range, bearing) with barcodes already resolved;
    ``groundtruth[i]`` rows are (t, x, y, theta).  All time-sorted.
    """

    odometry: Mapping[int, np.ndarray]
    measurements: Mapping[int, np.ndarray]
    groundtruth: Mapping[int, np.ndarray]
    landmarks: Mapping[int, tuple]
    barcodes: Mapping[int, int]              # barcode -> subject
    unknown_barcodes: Mapping[int, int] = field(default_factory=dict)   # robot -> skipped count

    @property
    def robots(self) -> list[int]:
        return sorted(self.odometry)

    @property
    def start_time(self) -> float:
        return float(min(g[0, 0] for g in self.groundtruth.values() if len(g)))

    def landmark_map(self) -> dict[str, tuple]:
        return {landmark_name(s): tuple(p) for s, p in self.landmarks.items()}

    def same_records(self, other: "DatasetBundle") -> bool:
        """Record-level equality (ignores the skipped-barcode counts)."""
        def eq(a, b):
            return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        return (eq(self.odometry, other.odometry) and eq(self.measurements, other.measurements)
                and eq(self.groundtruth, other.groundtruth)
                and dict(self.landmarks) == dict(other.landmarks)
                and dict(self.barcodes) == dict(other.barcodes))


def subdataset_dir(root, sub: int | None = None) -> Path:
    """Directory of sub-dataset ``sub`` under ``root`` (``root`` itself if None
    or if ``root`` already holds the record files)."""
    root = Path(root)
    if sub is None:
        return root
    for name in (f"MRCLAM_Dataset{sub}", f"MRCLAM{sub}", f"dataset{sub}", str(sub)):
        if (root / name).is_dir():
            return root / name
    if (root / "Barcodes.dat").is_file():
        return root
    raise MissingFile(f"no sub-dataset {sub} under {root}")


def load_bundle(path, n_robots: int = N_ROBOTS) -> DatasetBundle:
    root = Path(path)
    if not root.is_dir():
        raise MissingFile(str(root))
    bc = _read_table(root / "Barcodes.dat", 2)
    barcodes = {int(b): int(s) for s, b in bc}
    lm = _read_table(root / "Landmark_Groundtruth.dat", 3)
    landmarks = {int(s): (float(x), float(y)) for s, x, y in lm}
    odo, meas, gt, unknown = {}, {}, {}, {}
    for i in range(1, n_robots + 1):
        odo[i] = _sorted(_read_table(root / f"Robot{i}_Odometry.dat", 3))
        gt[i] = _sorted(_read_table(root / f"Robot{i}_Groundtruth.dat", 4))
        raw = _sorted(_read_table(root / f"Robot{i}_Measurement.dat", 4))
        subj = np.array([barcodes.get(int(b), -1) for b in raw[:, 1]], dtype=float)
        ok = subj > 0
        ok &= np.array([s <= n_robots or int(s) in landmarks for s in subj], dtype=bool)
        ok &= subj != i
        unknown[i] = int(np.count_nonzero(~ok))
        rec = raw[ok].copy()
        rec[:, 1] = subj[ok]
        meas[i] = rec
    return DatasetBundle(odo, meas, gt, landmarks, barcodes, unknown)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_bundle(bundle: DatasetBundle, path) -> None:
    """Write a bundle in the native text format (measurements by barcode)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    by_subject = {s: b for b, s in bundle.barcodes.items()}

    def dump(name, header, rows):
        with open(root / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {header}\n")
            for r in rows:
                fh.write("\t".join(r) + "\n")

    dump("Barcodes.dat", "Subject #\tBarcode #",
         [[str(s), str(b)] for b, s in sorted(bundle.barcodes.items(), key=lambda kv: kv[1])])
    dump("Landmark_Groundtruth.dat", "Subject #\tx [m]\ty [m]",
         [[str(s), _fmt(x), _fmt(y)] for s, (x, y) in sorted(bundle.landmarks.items())])
    for i in bundle.robots:
        dump(f"Robot{i}_Odometry.dat", "Time [s]\tforward velocity [m/s]\tangular velocity [rad/s]",
             [[_fmt(t), _fmt(v), _fmt(w)] for t, v, w in bundle.odometry[i]])
        dump(f"Robot{i}_Groundtruth.dat", "Time [s]\tx [m]\ty [m]\torientation [rad]",
             [[_fmt(v) for v in r] for r in bundle.groundtruth[i]])
        dump(f"Robot{i}_Measurement.dat", "Time [s]\tBarcode #\tRange [m]\tBearing [rad]",
             [[_fmt(t), str(by_subject[int(s)]), _fmt(r), _fmt(b)]
              for t, s, r, b in bundle.measurements[i]])


# --- resampling ----------------------------------------------------------------------------

@dataclass(eq=False)
class ReplayStreams:
    """Tick-aligned replay data.

    ``times`` has K+1 entries (absolute seconds); tick k >= 1 uses inputs
    ``v[k-1], omega[k-1]`` (the odometry held at the previous tick) and the
    measurements bucketed to tick k.  ``truth`` is (K+1, N, 3) as
    [theta, x, y].
    """

    times: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    truth: np.ndarray
    measurements: list                 # per tick 1..K: (M, 4) rows (robot, subject, range, bearing)
    landmarks: dict
    counts: dict

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def batches(self, k: int, noise: NoiseConfig) -> dict[int, list]:
        """Measurements of tick ``k`` (1-based) as per-robot bearing/range lists."""
        out: dict[int, list] = {}
        t = float(self.times[k])
        for r, s, rng, brg in self.measurements[k - 1]:
            r, s = int(r), int(s)
            target = s if s <= N_ROBOTS else landmark_name(s)
            out.setdefault(r, []).append(
                Measurement(r, target, BEARING_RANGE, [brg, rng], noise.R_bearing_range, t))
        return out


def _interp_truth(gt: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Linear interpolation of (x, y) and shortest-arc interpolation of theta."""
    ts = gt[:, 0]
    k = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
    span = ts[k + 1] - ts[k]
    f = np.clip(np.where(span > 0, (t - ts[k]) / np.where(span > 0, span, 1.0), 0.0), 0.0, 1.0)
    x = gt[k, 1] + f * (gt[k + 1, 1] - gt[k, 1])
    y = gt[k, 2] + f * (gt[k + 1, 2] - gt[k, 2])
    th = wrap_angle(gt[k, 3] + f * wrap_angle(gt[k + 1, 3] - gt[k, 3]))
    return np.stack([th, x, y], -1)


def _workspace_diagonal(bundle: DatasetBundle) -> float:
    pts = [np.asarray(list(bundle.landmarks.values()), dtype=float).reshape(-1, 2)]
    pts += [g[:, 1:3] for g in bundle.groundtruth.values()]
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    return float(np.hypot(*(hi - lo)))


def resample(bundle: DatasetBundle, dt: float = 0.02, t0: float = 0.0, t1: float = 500.0) -> ReplayStreams:
    """Align the bundle on a tick grid.

    ``t0`` and ``t1`` are seconds after the first ground-truth sample.
    Odometry is zero-order held, measurements go to the nearest tick (ties to
    the earlier one), ground truth is interpolated.  Measurements that land
    on tick 0 or have range <= 0 or beyond the workspace diagonal are dropped
    and counted.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    start = bundle.start_time
    end = min(float(g[-1, 0]) for g in bundle.groundtruth.values())
    a, b = start + t0, min(start + t1, end)
    if not t0 < t1 or b - a < dt:
        raise EmptyWindow(f"window [{t0}, {t1}] s holds no full tick")
    K = int(np.floor((b - a) / dt + 1e-9))
    times = a + dt * np.arange(K + 1)
    robots = bundle.robots
    n = len(robots)

    v = np.zeros((K, n))
    om = np.zeros((K, n))
    truth = np.empty((K + 1, n, 3))
    for c, i in enumerate(robots):
        odo = bundle.odometry[i]
        idx = np.searchsorted(odo[:, 0], times[:-1], side="right") - 1
        ok = idx >= 0
        v[ok, c] = odo[idx[ok], 1]
        om[ok, c] = odo[idx[ok], 2]
        truth[:, c] = _interp_truth(bundle.groundtruth[i], times)

    diag = _workspace_diagonal(bundle)
    rows = []
    counts = {"raw_in_window": 0, "dropped_outlier": 0, "dropped_first_tick": 0}
    for i in robots:
        m = bundle.measurements[i]
        # nearest tick, ties towards the earlier tick
        k = np.ceil((m[:, 0] - a) / dt - 0.5 - 1e-12).astype(int)
        inside = (k >= 0) & (k <= K)
        counts["raw_in_window"] += int(np.count_nonzero(inside))
        bad = inside & ((m[:, 2] <= 0) | (m[:, 2] > diag))
        counts["dropped_outlier"] += int(np.count_nonzero(bad))
        first = inside & ~bad & (k == 0)
        counts["dropped_first_tick"] += int(np.count_nonzero(first))
        keep = inside & ~bad & (k >= 1)
        for kk, rec in zip(k[keep], m[keep]):
            rows.append((int(kk), rec[0], i, int(rec[1]), rec[2], wrap_angle(rec[3])))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    per_tick = [[] for _ in range(K)]
    for kk, _, i, s, rng, brg in rows:
        per_tick[kk - 1].append((i, s, rng, brg))
    measurements = [np.array(p, dtype=float).reshape(-1, 4) for p in per_tick]
    counts["kept"] = len(rows)
    return ReplayStreams(times, v, om, truth, measurements, bundle.landmark_map(), counts)


# --- CSV cache -----------------------------------------------------------------------------

CACHE_HEADER = ("kind", "tick", "t", "robot", "subject", "a", "b", "c")
CACHE_SCHEMA = """Replay cache, one row per record:
  kind=grid   tick k, t = tick time; other fields empty
  kind=odom   tick k (0..K-1), robot, a = v [m/s], b = omega [rad/s]
  kind=truth  tick k (0..K), robot, a = theta [rad], b = x [m], c = y [m]
  kind=meas   tick k (1..K), robot, subject, a = range [m], b = bearing [rad]
  kind=lm     subject, a = x [m], b = y [m]
  kind=count  subject field holds the counter name, a = value
"""


def write_cache(streams: ReplayStreams, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CACHE_HEADER)
    for k, t in enumerate(streams.times):
        w.writerow(("grid", k, repr(float(t)), "", "", "", "", ""))
    for k in range(streams.steps):
        for c in range(streams.v.shape[1]):
            w.writerow(("odom", k, "", c + 1, "", repr(float(streams.v[k, c])), repr(float(streams.omega[k, c])), ""))
    for k in range(streams.steps + 1):
        for c in range(streams.truth.shape[1]):
            th, x, y = streams.truth[k, c]
            w.writerow(("truth", k, "", c + 1, "", repr(float(th)), repr(float(x)), repr(float(y))))
    for k, m in enumerate(streams.measurements, start=1):
        for r, s, rng, brg in m:
            w.writerow(("meas", k, "", int(r), int(s), repr(float(rng)), repr(float(brg)), ""))
    for name, (x, y) in sorted(streams.landmarks.items()):
        w.writerow(("lm", "", "", "", name, repr(float(x)), repr(float(y)), ""))
    for name, val in sorted(streams.counts.items()):
        w.writerow(("count", "", "", "", name, val, "", ""))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_cache(path) -> ReplayStreams:
    if not os.path.isfile(path):
        raise MissingFile(str(path))
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CACHE_HEADER:
        raise MalformedLine(path, 1, ",".join(rows[0]) if rows else "")
    times, odo, tru, meas, lms, counts = {}, [], [], [], {}, {}
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            kind = r[0]
            if kind == "grid":
                times[int(r[1])] = float(r[2])
            elif kind == "odom":
                odo.append((int(r[1]), int(r[3]), float(r[5]), float(r[6])))
            elif kind == "truth":
                tru.append((int(r[1]), int(r[3]), float(r[5]), float(r[6]), float(r[7])))
            elif kind == "meas":
                meas.append((int(r[1]), int(r[3]), int(r[4]), float(r[5]), float(r[6])))
            elif kind == "lm":
                lms[r[4]] = (float(r[5]), float(r[6]))
            elif kind == "count":
                counts[r[4]] = int(r[5])
            else:
                raise ValueError(kind)
        except (ValueError, IndexError):
            raise MalformedLine(path, lineno, ",".join(r)) from None
    K = len(times) - 1
    n = max(r for _, r, *_ in tru)
    v, om = np.zeros((K, n)), np.zeros((K, n))
    for k, r, a, b in odo:
        v[k, r - 1], om[k, r - 1] = a, b
    truth = np.zeros((K + 1, n, 3))
    for k, r, a, b, c in tru:
        truth[k, r - 1] = (a, b, c)
    per_tick = [[] for _ in range(K)]
    for k, r, s, a, b in meas:
        per_tick[k - 1].append((r, s, a, b))
    return ReplayStreams(np.array([times[k] for k in range(K + 1)]), v, om, truth,
                         [np.array(p, dtype=float).reshape(-1, 4) for p in per_tick], lms, counts)


# --- replay ----------------------------------------------------------------------------------

REPLAY_SPEED_VAR = 10.0      # (m/s)^2, assumed spread of another robot's unknown speed


def replay_noise(speed_var: float = REPLAY_SPEED_VAR) -> NoiseConfig:
    """Filter noise used for dataset replays (not tuned against the real data).

    The other robots' unknown speed gets a variance far above the platforms'
    top speed.  At replay tick rates the per-tick growth dt^2 sigma_u^2 is
    otherwise so small that stale copies of a robot's own position, echoed
    back by its teammates, drag its estimate behind the true motion.
    """
    return NoiseConfig(Q_w=np.diag([0.01**2, 0.05**2]), R_bearing_range=np.diag([0.05**2, 0.1**2]),
                       sigma_u_sq=speed_var)


def max_speed_var(bundle: DatasetBundle) -> float:
    """Largest squared commanded forward speed in the bundle."""
    return max(float(np.max(o[:, 1] ** 2, initial=0.0)) for o in bundle.odometry.values())


def rate_scaled_self_weight(dt: float, per_second: float = 0.5) -> float:
    """Self CI weight that keeps ``per_second`` of the own information per second
    of back-to-back fusions, e.g. 0.5 at a 1 s tick and ~0.986 at 0.02 s."""
    return float(per_second ** dt)


def run_replay(streams: ReplayStreams, algorithms: Sequence[str] = ALGORITHMS,
               noise: NoiseConfig | None = None, rho: float = 0.0, blackouts: Sequence = (),
               seed: int = 0, rmse: str = VERBATIM,
               self_weight: float | None = None) -> dict[str, MetricSeries]:
    """Run the algorithms over replayed data with full communication subject to
    link failures ``rho`` and blackouts (seconds after the window start).

    ``self_weight`` defaults to ``rate_scaled_self_weight(streams.dt)``.
    """
    _check_algorithms(algorithms)
    noise = noise or replay_noise()
    n = streams.truth.shape[1]
    if self_weight is None:
        self_weight = rate_scaled_self_weight(streams.dt)
    cfg = ScenarioConfig(n_robots=n, landmarks=streams.landmarks, noise=noise, rmse=rmse,
                         steps=streams.steps, dt=streams.dt, self_weight=self_weight)
    poses = [RobotPose.from_vector(q) for q in streams.truth[0]]
    teams = {a: make_team(a, cfg, poses) for a in algorithms}
    link_rng = stream(seed, LINK, 0)
    off = ~np.eye(n, dtype=bool)
    K = streams.steps
    rmse_v = {a: np.empty(K) for a in algorithms}
    rmte_v = {a: np.empty(K) for a in algorithms}
    t_rel = streams.times - streams.times[0]
    for k in range(1, K + 1):
        U = link_rng.random((n, n))
        links = (U >= rho) & off & (not in_blackout(t_rel[k], blackouts))
        L = links[None]
        rounds = None
        for a, team in teams.items():
            if rounds is None:
                rounds = team.layout.pack(streams.batches(k, noise))
            team.propagate_arrays(streams.v[k - 1][None], streams.omega[k - 1][None], streams.dt)
            for z, mask, R in rounds:
                team.observe_arrays(z, mask, R, L)
            team.communicate_arrays(L)
            means, covs = team.position_estimates()
            e = means[0] - streams.truth[k, :, 1:3]
            norms = np.hypot(e[:, 0], e[:, 1])
            rmse_v[a][k - 1] = np.sqrt(norms.mean()) if rmse == VERBATIM else np.sqrt((norms**2).mean())
            rmte_v[a][k - 1] = np.sqrt(np.trace(covs[0], axis1=-2, axis2=-1).mean())
    return {a: MetricSeries(a, t_rel[1:], rmse_v[a], rmte_v[a]) for a in algorithms}
