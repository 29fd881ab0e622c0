"""Command-line entry point: ``cicoloc simulate|sweep|replay|check-bounded``.

Exit codes: 0 success, 1 bad input (configuration, files, arguments),
2 failure while running.  Scenario flags mirror the scenario document keys
(``--failure-rho 0.5`` overrides ``failure_rho``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, EmptyWindow, LocalizationError, MalformedLine, MissingFile
from .graphs import TopologyGraph, boundedness_predicate, format_edge_list, read_edge_list, split_by_observer
from .sim import (ALGORITHMS, CSV_HEADER, SWEEP_HEADER, ScenarioConfig, config_digest, run_experiment,
                  run_sweep, write_csv)

INPUT_ERRORS = (ConfigError, MissingFile, MalformedLine, EmptyWindow, FileNotFoundError)


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    config: dict
    algorithms: list
    outputs: dict
    version: str
    config_digest: str

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- argument helpers ----------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario overrides (values parsed as YAML)")
    for f in dataclasses.fields(ScenarioConfig):
        if f.name == "seed":
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE")


def _load_config(args) -> ScenarioConfig:
    path = Path(args.config)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("scenario document must be a mapping")
    for key, val in vars(args).items():
        if key.startswith("cfg_") and val is not None:
            try:
                doc[key[4:]] = yaml.safe_load(val)
            except yaml.YAMLError as exc:
                raise ConfigError(f"bad value for --{key[4:]}: {val!r}") from exc
    if args.seed is not None:
        doc["seed"] = args.seed
    return ScenarioConfig.from_dict(doc)


def _algorithms(text: str | None) -> list[str]:
    if not text:
        return list(ALGORITHMS)
    algs = [a.strip() for a in text.split(",") if a.strip()]
    for a in algs:
        if a not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {a!r}; choose from {', '.join(ALGORITHMS)}")
    return algs


def _values(text: str) -> list[float]:
    vals = [v.strip() for v in (text or "").split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values is empty")
    try:
        return [float(v) for v in vals]
    except ValueError as exc:
        raise ConfigError(f"bad --values {text!r}") from exc


def _interval(text: str | None, name: str):
    if text is None:
        return None
    try:
        a, b = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"{name} must look like t0:t1, got {text!r}") from exc
    if not a < b or a < 0:
        raise ConfigError(f"{name} {text!r} is not an interval with 0 <= t0 < t1")
    return a, b


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands --------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _load_config(args)
    algs = _algorithms(args.algorithms)
    out = _out_dir(args.out)
    res = run_experiment(config, algs)
    csv_path = out / "metrics.csv"
    digest = write_csv(csv_path, CSV_HEADER, res.rows())
    RunManifest(config.to_dict(), algs, {"metrics": str(csv_path), "metrics_sha256": digest,
                                         "truth_sha256": res.truth_digest},
                __version__, config_digest(config)).write(out / "manifest.json")
    for a, s in res.series.items():
        print(f"{a:7s} mean RMSE {s.mean_rmse:.4f}  final RMSE {s.rmse[-1]:.4f}  final RMTE {s.rmte[-1]:.4f}")
    print(f"wrote {csv_path} (sha256 {digest[:16]})")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    algs = _algorithms(args.algorithms)
    values = _values(args.values)
    if args.graphs < 1:
        raise ConfigError("--graphs must be at least 1")
    seeds = None
    if args.seeds is not None:
        seeds = [config.seed + k for k in range(args.seeds)]
    out = _out_dir(args.out)
    rows, _ = run_sweep(config, args.param, values, args.graphs, seeds, algs, args.jobs)
    csv_path = out / "sweep.csv"
    digest = write_csv(csv_path, SWEEP_HEADER, rows)
    RunManifest(config.to_dict(), algs, {"sweep": str(csv_path), "sweep_sha256": digest,
                                         "param": args.param, "values": values, "graphs": args.graphs,
                                         "seeds": seeds or [config.seed]},
                __version__, config_digest(config)).write(out / "manifest.json")
    for r in rows:
        print(f"{r[0]}={r[1]:<5g} {r[2]:7s} RMSE {r[4]:.4f} ± {r[5]:.4f}  final {r[6]:.4f}")
    print(f"wrote {csv_path} (sha256 {digest[:16]})")
    return 0


def cmd_replay(args) -> int:
    from .utias import (load_bundle, max_speed_var, replay_noise, resample, run_replay, subdataset_dir,
                        write_cache)

    window = _interval(args.window, "--window")
    blackout = _interval(args.blackout, "--blackout")
    if not 0.0 <= args.rho <= 1.0:
        raise ConfigError("--rho must be in [0, 1]")
    algs = _algorithms(args.algorithms)
    bundle = load_bundle(subdataset_dir(args.dataset, args.subdataset))
    streams = resample(bundle, args.dt, *window)
    out = _out_dir(args.out)
    if args.cache:
        write_cache(streams, out / "replay_cache.csv")
    blackouts = [(blackout[0] - window[0], blackout[1] - window[0])] if blackout else []
    if args.self_weight is not None and not 0.0 < args.self_weight <= 1.0:
        raise ConfigError("--self-weight must be in (0, 1]")
    if args.speed_var == "max":
        speed_var = max_speed_var(bundle)
    else:
        try:
            speed_var = float(args.speed_var)
        except ValueError as exc:
            raise ConfigError(f"--speed-var must be a number or 'max', got {args.speed_var!r}") from exc
        if speed_var < 0:
            raise ConfigError("--speed-var must be non-negative")
    series = run_replay(streams, algs, noise=replay_noise(speed_var), rho=args.rho, blackouts=blackouts,
                        seed=args.seed or 0, self_weight=args.self_weight)
    rows = []
    for a, s in series.items():
        for t, e, u in zip(s.t, s.rmse, s.rmte):
            t_abs = t + window[0]
            flag = int(bool(blackout) and blackout[0] <= t_abs < blackout[1])
            rows.append((t_abs, a, e, u, args.rho, 1.0, args.seed or 0, flag))
    csv_path = out / "replay.csv"
    digest = write_csv(csv_path, CSV_HEADER + ("blackout",), rows)
    summary = [(a, float(np.mean(s.rmse)), float(np.mean(s.rmte))) for a, s in series.items()]
    sum_path = out / "replay_summary.csv"
    write_csv(sum_path, ("algorithm", "rmse_time_avg", "rmte_time_avg"), summary)
    RunManifest({"dataset": str(args.dataset), "subdataset": args.subdataset, "window": list(window),
                 "blackout": list(blackout) if blackout else None, "rho": args.rho, "dt": args.dt,
                 "seed": args.seed or 0, "self_weight": args.self_weight, "speed_var": speed_var,
                 "counts": streams.counts},
                algs, {"replay": str(csv_path), "replay_sha256": digest, "summary": str(sum_path)},
                __version__, "").write(out / "manifest.json")
    for a, e, u in summary:
        print(f"{a:7s} time-averaged RMSE {e:.4f}  RMTE {u:.4f}")
    return 0


def cmd_check_bounded(args) -> int:
    obs_edges = []
    for path in args.obs:
        try:
            obs_edges += read_edge_list(path)
        except OSError as exc:
            raise MissingFile(str(path)) from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        comm_edges = read_edge_list(args.comm) if args.comm else []
    except OSError as exc:
        raise MissingFile(str(args.comm)) from exc
    except ValueError as exc:
        raise ConfigError(f"{args.comm}: {exc}") from exc
    robots = [x for e in obs_edges + comm_edges for x in e if isinstance(x, int)]
    n = max([args.n_robots or 0] + robots)
    if not 1 <= args.robot <= n:
        raise ConfigError(f"unknown robot {args.robot} (graph has {n} robots)")
    landmarks = sorted({x for e in obs_edges for x in e if isinstance(x, str)})
    if any(isinstance(x, str) for e in comm_edges for x in e):
        raise ConfigError("communication edges cannot involve landmarks")
    try:
        obs = TopologyGraph.over(n, obs_edges, landmarks)
        gc = TopologyGraph.over(n, comm_edges, ())
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    ok, merged = boundedness_predicate(split_by_observer(obs), gc, args.robot)
    print(f"bounded: {'true' if ok else 'false'}")
    print(f"robot: {args.robot}")
    print("merged observation graph:")
    sys.stdout.write(format_edge_list(merged.edges))
    return 0


# --- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cicoloc", description="Cooperative localization experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run all algorithms on one synthesized scenario")
    s.add_argument("config")
    s.add_argument("--algorithms", help="comma-separated subset of " + ",".join(ALGORITHMS))
    s.add_argument("--out", default="out")
    s.add_argument("--seed", type=int)
    _config_flags(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="paired sweep over failure probability or link density")
    s.add_argument("config")
    s.add_argument("--param", choices=("rho", "density"), required=True)
    s.add_argument("--values", required=True, help="comma-separated values in [0, 1]")
    s.add_argument("--graphs", type=int, default=1, help="random graphs per value")
    s.add_argument("--seeds", type=int, help="number of consecutive seeds per value")
    s.add_argument("--algorithms")
    s.add_argument("--out", default="out")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int)
    _config_flags(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("replay", help="replay a UTIAS sub-dataset")
    s.add_argument("dataset")
    s.add_argument("--subdataset", type=int)
    s.add_argument("--window", default="0:500", help="t0:t1 seconds after the first ground-truth sample")
    s.add_argument("--blackout", help="t0:t1 seconds, same time base as --window")
    s.add_argument("--rho", type=float, default=0.0)
    s.add_argument("--dt", type=float, default=0.02)
    s.add_argument("--algorithms")
    s.add_argument("--self-weight", type=float,
                   help="GS-CI self weight (default 0.5 ** dt, i.e. half the own information per second)")
    s.add_argument("--speed-var", default="10",
                   help="GS-CI variance of the other robots' unknown speed in (m/s)^2, or 'max' for the "
                        "largest squared commanded speed in the data")
    s.add_argument("--cache", action="store_true", help="also write the resampled CSV cache")
    s.add_argument("--out", default="out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("check-bounded", help="evaluate the boundedness condition for one robot")
    s.add_argument("obs", nargs="+", help="observation edge-list files (\"i j\" or \"i L\" per line)")
    s.add_argument("--comm", help="communication edge-list file (\"sender receiver\" per line)")
    s.add_argument("--robot", type=int, required=True)
    s.add_argument("--n-robots", type=int, help="team size if not every robot appears in an edge")
    s.add_argument("--seed", type=int, help="accepted for uniformity; the check is deterministic")
    s.set_defaults(func=cmd_check_bounded)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (LocalizationError, ArithmeticError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
