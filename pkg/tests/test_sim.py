import numpy as np
import pytest

from cicoloc.errors import ConfigError, LengthMismatch
from cicoloc.graphs import TopologyGraph
from cicoloc.models import NoiseConfig, OdometryInput, RobotPose, relative_observation
from cicoloc.sim import (ALGORITHMS, CSV_HEADER, GraphSpec, MetricSeries, ScenarioConfig, anees_bound,
                         complete_graph, compute_rmse, compute_rmte, config_digest, deliver_messages,
                         format_csv, generate_random_graph, generate_world, plateau_variation,
                         run_batch, run_experiment, run_sweep, step_world, stream, window_slope,
                         write_csv)

SMALL = ScenarioConfig(n_robots=3, steps=30, seed=4)


def test_random_graph_extremes():
    rng = np.random.default_rng(0)
    assert not generate_random_graph(5, 0.0, rng).edges
    assert len(generate_random_graph(5, 1.0, rng).edges) == 20
    with pytest.raises(ValueError):
        generate_random_graph(5, 1.5, rng)


def test_random_graph_edge_count_statistics():
    rng = np.random.default_rng(1)
    counts = [len(generate_random_graph(5, 0.5, rng).edges) for _ in range(10000)]
    band = 3 * np.sqrt(20 * 0.25 / 10000)
    assert abs(np.mean(counts) - 10.0) <= band


def test_random_graphs_are_nested_in_density():
    lo = generate_random_graph(6, 0.3, stream(1, 2, 0, 1))
    hi = generate_random_graph(6, 0.7, stream(1, 2, 0, 1))
    assert lo.edges <= hi.edges


def test_step_world_static_and_exact():
    quiet = NoiseConfig(Q_w=np.zeros((2, 2)), R_landmark=np.zeros((2, 2)), R_relative=np.zeros((2, 2)))
    truth = [RobotPose(0.3, [1.0, 0.0]), RobotPose(-1.0, [0.0, 2.0])]
    obs = TopologyGraph.over(2, [(1, 2), (2, "L"), (1, "L")])
    inputs = [OdometryInput(0.0, 0.0, 1.0)] * 2
    new, batches = step_world(truth, inputs, quiet, np.random.default_rng(0), obs, {"L": (0.0, 0.0)})
    assert all(np.array_equal(a.position, b.position) and a.theta == b.theta for a, b in zip(new, truth))
    assert sum(len(v) for v in batches.values()) == len(obs.edges)
    m = [m for m in batches[1] if m.target == 2][0]
    assert np.allclose(m.value, relative_observation(truth[0], truth[1].position).value)


def test_step_world_deterministic():
    truth = [RobotPose(0.3, [1.0, 0.0]), RobotPose(-1.0, [0.0, 2.0])]
    obs = complete_graph(2, ["L"]).with_edges([(1, "L"), (2, "L")])
    inputs = [OdometryInput(0.05, 0.01, 1.0)] * 2
    a = step_world(truth, inputs, NoiseConfig(), np.random.default_rng(3), obs, {"L": (0, 0)})
    b = step_world(truth, inputs, NoiseConfig(), np.random.default_rng(3), obs, {"L": (0, 0)})
    for i in a[1]:
        for ma, mb in zip(a[1][i], b[1][i]):
            assert np.array_equal(ma.value, mb.value)


def test_delivery_examples():
    g = complete_graph(4)
    rng = np.random.default_rng(0)
    assert deliver_messages(g, 0.0, (), 1.0, rng) == g.edges
    assert deliver_messages(g, 1.0, (), 1.0, rng) == frozenset()
    assert deliver_messages(g, 0.0, [(0.5, 2.0)], 1.0, rng) == frozenset()
    assert deliver_messages(g, 0.0, [(0.5, 2.0)], 2.0, rng) == g.edges


def test_delivery_rate_statistics():
    g = TopologyGraph.over(2, [(1, 2)], ())
    rng = np.random.default_rng(9)
    hits = sum(bool(deliver_messages(g, 0.9, (), 0.0, rng)) for _ in range(10000))
    assert abs(hits / 10000 - 0.1) <= 3 * np.sqrt(0.09 / 10000)


def test_handshake_success_rate_matches_link_count():
    rho = 0.4
    cfg = ScenarioConfig(n_robots=2, steps=20000, failure_rho=rho, seed=1)
    w = generate_world(cfg)
    both = (w.ls_links[0, :, 0, 1] & w.ls_links[0, :, 1, 0]).mean()
    one = w.ls_links[0, :, 1, 0].mean()
    band = 3 * np.sqrt(0.25 / 20000)
    assert abs(one - (1 - rho)) <= band
    assert abs(both - (1 - rho) ** 2) <= band


def test_metric_examples():
    assert compute_rmse(np.zeros((3, 2)), np.zeros((3, 2))) == 0.0
    assert compute_rmse([[4.0, 0.0]], [[0.0, 0.0]]) == pytest.approx(2.0)
    assert compute_rmse([[3.0, 4.0]], [[0.0, 0.0]], mode="conventional") == pytest.approx(5.0)
    assert compute_rmte(np.tile(np.eye(2), (4, 1, 1))) == pytest.approx(np.sqrt(2))
    with pytest.raises(LengthMismatch):
        compute_rmse(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(LengthMismatch):
        MetricSeries("x", np.arange(3), np.zeros(3), np.zeros(2))


def test_small_helpers():
    assert window_slope(np.arange(5.0), 2 * np.arange(5.0) + 1) == pytest.approx(2.0)
    assert plateau_variation(np.r_[np.zeros(95), np.full(5, 10.0)]) == 0.0
    assert plateau_variation(np.linspace(1, 2, 100)) == pytest.approx((4 / 99) / (1 + 97 / 99))
    assert anees_bound(1) == pytest.approx(9.2103, rel=1e-4)
    assert anees_bound(200) < anees_bound(10)


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(failure_rho=1.5)
    with pytest.raises(ConfigError):
        ScenarioConfig(steps=10, comm_blackouts=((5.0, 20.0),))
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"n_robot": 3})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_yaml("obs_graph: {density: 2}")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_yaml("steps: [1, 2")


def test_config_round_trip_and_digest():
    cfg = ScenarioConfig.from_yaml("""
n_robots: 4
landmarks: {L: [0, 0], L2: [3, 1]}
obs_graph: {edges: [[1, L], [2, 1], [3, L2]]}
comm_graph: complete
failure_rho: 0.25
comm_blackouts: [[5, 8]]
steps: 20
""")
    assert cfg.obs_graph.edges == ((1, "L"), (2, 1), (3, "L2"))
    back = ScenarioConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    assert config_digest(back) == config_digest(cfg)
    assert config_digest(cfg.with_(seed=1)) != config_digest(cfg)


def test_run_is_deterministic_and_paired(tmp_path):
    a = run_experiment(SMALL)
    b = run_experiment(SMALL)
    da = write_csv(tmp_path / "a.csv", CSV_HEADER, a.rows())
    db = write_csv(tmp_path / "b.csv", CSV_HEADER, b.rows())
    assert da == db
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    solo = run_experiment(SMALL, ["GS-CI"])
    assert solo.truth_digest == a.truth_digest
    assert np.array_equal(solo.series["GS-CI"].rmse, a.series["GS-CI"].rmse)


def test_seed_isolation():
    base = generate_world(SMALL)
    other = generate_world(SMALL.with_(failure_rho=0.7, comm_graph=GraphSpec(density=0.3)))
    assert base.digest() == other.digest()
    assert np.array_equal(base.z, other.z) and np.array_equal(base.v, other.v)
    assert generate_world(SMALL.with_(seed=5)).digest() != base.digest()


def test_batch_equals_single_runs():
    cfgs = [SMALL.with_(seed=s, failure_rho=r) for s, r in [(1, 0.0), (2, 0.5), (3, 0.9)]]
    batch = run_batch(cfgs)
    for c, res in zip(cfgs, batch):
        one = run_experiment(c)
        for alg in ALGORITHMS:
            assert np.array_equal(one.series[alg].rmse, res.series[alg].rmse)
            assert np.array_equal(one.series[alg].rmte, res.series[alg].rmte)


def test_sweep_shapes_and_job_independence():
    rows, raw = run_sweep(SMALL, "rho", [0.0, 0.5], graphs=2, seeds=[1, 2], algorithms=["GS-CI", "LS-CI"])
    assert len(rows) == 4 and all(r[3] == 4 for r in rows)
    rows2, raw2 = run_sweep(SMALL, "rho", [0.0, 0.5], graphs=2, seeds=[1, 2], algorithms=["GS-CI", "LS-CI"],
                            jobs=2)
    assert format_csv(["x"] * 10, rows) == format_csv(["x"] * 10, rows2)
    with pytest.raises(ConfigError):
        run_sweep(SMALL, "rho", [])
    with pytest.raises(ConfigError):
        run_sweep(SMALL, "speed", [0.1])


def test_blackout_silences_all_links():
    cfg = SMALL.with_(comm_blackouts=((10.0, 20.0),))
    w = generate_world(cfg)
    t = cfg.dt * np.arange(1, cfg.steps + 1)
    inside = (t >= 10) & (t < 20)
    assert not w.gs_links[0, inside].any() and not w.ls_links[0, inside].any()
    assert w.gs_links[0, ~inside].any()


def test_bearing_range_scenario_runs():
    res = run_experiment(SMALL.with_(measurement="bearing_range"))
    for s in res.series.values():
        assert np.all(np.isfinite(s.rmse)) and np.all(s.rmte >= 0)


RHOS = (0.0, 0.25, 0.5, 0.75, 1.0)


@pytest.fixture(scope="module")
def rho_suite():
    base = ScenarioConfig(steps=200)
    out = {}
    for rho in RHOS:
        res = run_batch([base.with_(seed=s, failure_rho=rho) for s in range(50)])
        for a in ALGORITHMS:
            v = np.array([r.series[a].mean_rmse for r in res])
            out.setdefault(a, []).append((v.mean(), v.std(ddof=1) / np.sqrt(v.size)))
    return out


KNOWN_NON_MONOTONE = pytest.mark.xfail(
    strict=True, reason="fewer fusions help this filter in the example scenario; see README")


@pytest.mark.slow
@pytest.mark.parametrize("alg", [
    "LS-Cen", "LS-CI", "LS-BDA", "LS-SCI",
    pytest.param("GS-CI", marks=KNOWN_NON_MONOTONE),
])
def test_rmse_non_decreasing_in_failure_probability(rho_suite, alg):
    stats = rho_suite[alg]
    for (m0, s0), (m1, s1) in zip(stats, stats[1:]):
        assert m1 >= m0 - np.hypot(s0, s1)
