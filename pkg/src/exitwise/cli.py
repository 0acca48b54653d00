"""Command line front end.

Subcommands: bound (one scenario), sweep (a family of offset scenarios),
identities (coupling identity checks), mfpt (expected-exit field and probes).
Configs are TOML; reports are CSV (12 significant digits, UTF-8, stable byte
layout for any worker count) with optional JSON mirrors.

Exit status: 0 success, 1 configuration or environment error, 2 completed
with a failed check (a violated bound or a failed identity).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .model import (
    Ball,
    Box,
    ConfigurationError,
    InitialCondition,
    Interval,
    brownian_motion,
    constant_coefficient_model,
    drifted_brownian_motion,
)
from .exit_sim import SimConfig
from .expected_exit import estimate_expected_exit_mc, solve_dirichlet_fd_1d
from .bound_harness import (
    REPORT_COLUMNS,
    Scenario,
    ScenarioFailure,
    VERDICT_VIOLATED,
    run_scenario_suite,
    verify_proof_identities,
)

WORKERS_ENV = "EXITWISE_WORKERS"

IDENTITY_COLUMNS = ("identity", "lhs_mean", "rhs_mean", "diff_stderr", "z",
                    "max_abs_diff", "status", "n", "censor_rate", "flags")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".12g")
    if isinstance(value, (list, tuple, np.ndarray)):
        return ";".join(_fmt(v) for v in value)
    return str(value)


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid TOML: {exc}")


def _table(cfg: dict, key: str) -> dict:
    if key not in cfg:
        raise ConfigurationError(f"[{key}] table is required in the config file")
    if not isinstance(cfg[key], dict):
        raise ConfigurationError(f"[{key}] must be a table")
    return cfg[key]


def _num(tbl: dict, key: str, path: str, default=None, required: bool = False) -> float:
    if key not in tbl:
        if required:
            raise ConfigurationError(f"{path}.{key} is required")
        return default
    v = tbl[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{path}.{key} must be a number, got {v!r}")
    return float(v)


def _int(tbl: dict, key: str, path: str, default=None, required: bool = False):
    if key not in tbl:
        if required:
            raise ConfigurationError(f"{path}.{key} is required")
        return default
    v = tbl[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigurationError(f"{path}.{key} must be an integer, got {v!r}")
    return v


def _vector(value, path: str) -> list[float]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [float(value)]
    if isinstance(value, list) and value and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        return [float(v) for v in value]
    raise ConfigurationError(f"{path} must be a number or a list of numbers")


def _parse_model(tbl, path: str):
    if not isinstance(tbl, dict):
        raise ConfigurationError(f"{path} must be a table")
    kind = tbl.get("kind")
    if kind == "bm":
        return brownian_motion(sigma=_num(tbl, "sigma", path, default=1.0),
                               dim=_int(tbl, "dim", path, default=1))
    if kind == "drifted_bm":
        if "mu" not in tbl:
            raise ConfigurationError(f"{path}.mu is required")
        mu = _vector(tbl["mu"], f"{path}.mu")
        dim = _int(tbl, "dim", path, default=len(mu))
        mu_arr = mu[0] if len(mu) == 1 else mu
        return drifted_brownian_motion(mu_arr, sigma=_num(tbl, "sigma", path, default=1.0),
                                       dim=dim)
    if kind == "constant":
        if "drift" not in tbl or "diffusion" not in tbl:
            raise ConfigurationError(f"{path} needs both drift and diffusion")
        return constant_coefficient_model(tbl["drift"], tbl["diffusion"])
    raise ConfigurationError(
        f"{path}.kind must be one of bm, drifted_bm, constant; got {kind!r}")


def _parse_region(tbl, path: str):
    if not isinstance(tbl, dict):
        raise ConfigurationError(f"{path} must be a table")
    kind = tbl.get("kind")
    if kind == "interval":
        return Interval(lo=_num(tbl, "lo", path, required=True),
                        hi=_num(tbl, "hi", path, required=True))
    if kind == "box":
        if "lo" not in tbl or "hi" not in tbl:
            raise ConfigurationError(f"{path} needs lo and hi lists")
        return Box(lo=_vector(tbl["lo"], f"{path}.lo"), hi=_vector(tbl["hi"], f"{path}.hi"))
    if kind == "ball":
        if "center" not in tbl:
            raise ConfigurationError(f"{path}.center is required")
        return Ball(center=_vector(tbl["center"], f"{path}.center"),
                    radius=_num(tbl, "radius", path, required=True))
    raise ConfigurationError(
        f"{path}.kind must be one of interval, box, ball; got {kind!r}")


def _parse_initial(value, dim: int, path: str) -> InitialCondition:
    if isinstance(value, dict):
        if "points" not in value or "weights" not in value:
            raise ConfigurationError(f"{path} mixture needs points and weights")
        return InitialCondition.mixture(value["points"], value["weights"])
    pt = _vector(value, path)
    if len(pt) != dim:
        raise ConfigurationError(
            f"{path} has dimension {len(pt)}, the model has dimension {dim}")
    return InitialCondition.fixed(pt)


def _parse_sim_config(tbl: dict, path: str, cli_seed: int | None) -> SimConfig:
    seed = cli_seed if cli_seed is not None else _int(tbl, "seed", path, required=True)
    kwargs = dict(
        dt=_num(tbl, "dt", path, required=True),
        seed=seed,
        t_max=_num(tbl, "t_max", path, default=None),
        substep_threshold=_num(tbl, "substep_threshold", path, default=0.0),
    )
    if "bridge_correction" in tbl:
        if not isinstance(tbl["bridge_correction"], bool):
            raise ConfigurationError(f"{path}.bridge_correction must be a boolean")
        kwargs["bridge_correction"] = tbl["bridge_correction"]
    shard = _int(tbl, "shard_size", path, default=None)
    if shard is not None:
        kwargs["shard_size"] = shard
    return SimConfig(**kwargs)


def _build_scenario(tbl: dict, path: str, cli_seed: int | None) -> Scenario:
    model = _parse_model(tbl.get("model"), f"{path}.model")
    region1 = _parse_region(tbl.get("region1"), f"{path}.region1")
    region2 = _parse_region(tbl.get("region2"), f"{path}.region2")
    if "initial" not in tbl:
        raise ConfigurationError(f"{path}.initial is required")
    initial = _parse_initial(tbl["initial"], model.n, f"{path}.initial")
    cfg = _parse_sim_config(tbl, path, cli_seed)
    method = tbl.get("method", "auto")
    if method not in ("auto", "fd", "mc"):
        raise ConfigurationError(f"{path}.method must be auto, fd, or mc")
    echo = json.loads(json.dumps(tbl))  # plain-data copy of the raw scenario
    echo["seed"] = cfg.seed
    sid = tbl.get("id", "scenario")
    if not isinstance(sid, str) or not sid:
        raise ConfigurationError(f"{path}.id must be a non-empty string")
    return Scenario(
        scenario_id=sid, model=model, initial=initial,
        region1=region1, region2=region2, cfg=cfg,
        n=_int(tbl, "n", path, required=True),
        m=_int(tbl, "m", path, default=16),
        method=method, inputs_echo=echo,
    )


def _shifted_region_table(tbl: dict, offset: float, path: str) -> dict:
    out = dict(tbl)
    kind = tbl.get("kind")
    if kind == "interval":
        out["lo"] = _num(tbl, "lo", path, required=True) + offset
        out["hi"] = _num(tbl, "hi", path, required=True) + offset
    elif kind == "box":
        lo = _vector(tbl.get("lo"), f"{path}.lo")
        hi = _vector(tbl.get("hi"), f"{path}.hi")
        lo[0] += offset
        hi[0] += offset
        out["lo"], out["hi"] = lo, hi
    elif kind == "ball":
        center = _vector(tbl.get("center"), f"{path}.center")
        center[0] += offset
        out["center"] = center
    else:
        raise ConfigurationError(f"{path}.kind must be interval, box, or ball")
    return out


def _suite_status(rows) -> int:
    if any(isinstance(r, ScenarioFailure) for r in rows):
        return 1
    if any(r.verdict == VERDICT_VIOLATED for r in rows):
        return 2
    return 0


def _print_rows(rows) -> None:
    for r in rows:
        if isinstance(r, ScenarioFailure):
            print(f"{r.scenario_id}: error ({r.message})")
        else:
            print(f"{r.scenario_id}: verdict={r.verdict} "
                  f"lhs={r.lhs.mean:.6g} (stderr {r.lhs.stderr:.3g}) "
                  f"rhs={r.rhs:.6g} margin={r.margin:.6g}")


def _write_reports(rows, out_dir: str, csv_name: str, fmt: str) -> None:
    flat = [r.to_flat_dict() for r in rows]
    _write_csv(os.path.join(out_dir, csv_name), REPORT_COLUMNS,
               [[row[col] for col in REPORT_COLUMNS] for row in flat])
    if fmt == "json":
        for r, row in zip(rows, flat):
            payload = dict(row)
            payload["inputs_echo"] = getattr(r, "inputs_echo", None)
            _write_json(os.path.join(out_dir, f"{r.scenario_id}.json"), payload)


def cmd_bound(cfg: dict, args) -> int:
    sc = _build_scenario(_table(cfg, "scenario"), "scenario", args.seed)
    rows = run_scenario_suite([sc], workers=args.workers)
    _print_rows(rows)
    _write_reports(rows, args.out, "bound_report.csv", args.format)
    return _suite_status(rows)


def cmd_sweep(cfg: dict, args) -> int:
    tbl = _table(cfg, "sweep")
    offsets = tbl.get("offsets")
    if not isinstance(offsets, list) or not offsets:
        raise ConfigurationError("sweep.offsets must be a non-empty list of numbers")
    base_region = tbl.get("region")
    if base_region is None:
        raise ConfigurationError("sweep.region is required")
    prefix = tbl.get("id_prefix", "off")
    scenarios = []
    for off in offsets:
        if isinstance(off, bool) or not isinstance(off, (int, float)):
            raise ConfigurationError(f"sweep.offsets entries must be numbers, got {off!r}")
        sc_tbl = {k: v for k, v in tbl.items()
                  if k not in ("offsets", "region", "id_prefix")}
        sc_tbl["id"] = f"{prefix}_{float(off):.12g}"
        sc_tbl["region1"] = dict(base_region)
        sc_tbl["region2"] = _shifted_region_table(base_region, float(off), "sweep.region")
        scenarios.append(_build_scenario(sc_tbl, f"sweep[{off:g}]", args.seed))
    rows = run_scenario_suite(scenarios, workers=args.workers)
    _print_rows(rows)
    _write_reports(rows, args.out, "sweep_report.csv", args.format)
    return _suite_status(rows)


def cmd_identities(cfg: dict, args) -> int:
    tbl = _table(cfg, "identities")
    path = "identities"
    model = _parse_model(tbl.get("model"), f"{path}.model")
    region1 = _parse_region(tbl.get("region1"), f"{path}.region1")
    region2 = _parse_region(tbl.get("region2"), f"{path}.region2")
    if "a" not in tbl:
        raise ConfigurationError(f"{path}.a (the start point) is required")
    a = _vector(tbl["a"], f"{path}.a")
    cfg_sim = _parse_sim_config(tbl, path, args.seed)
    n = _int(tbl, "n", path, required=True)
    nodes = _int(tbl, "nodes", path, default=1001)
    report = verify_proof_identities(model, a, region1, region2, cfg_sim, n,
                                     workers=args.workers, nodes=nodes)
    rows = [[row.identity, row.lhs_mean, row.rhs_mean, row.diff_stderr, row.z,
             row.max_abs_diff, row.status, report.n, report.censor_rate,
             list(report.flags)] for row in report.rows]
    _write_csv(os.path.join(args.out, "identities_report.csv"), IDENTITY_COLUMNS, rows)
    if args.format == "json":
        _write_json(os.path.join(args.out, "identities_report.json"), {
            "rows": [vars(row) for row in report.rows],
            "n": report.n,
            "censor_rate": report.censor_rate,
            "max_clamp_distance": report.max_clamp_distance,
            "exact_decomposition": report.exact_decomposition,
            "flags": list(report.flags),
        })
    for row in report.rows:
        print(f"{row.identity}: z={row.z:.3f} status={row.status}")
    if report.flags:
        print(f"flags: {', '.join(report.flags)}")
    return 0 if report.ok else 2


def cmd_mfpt(cfg: dict, args) -> int:
    tbl = _table(cfg, "mfpt")
    path = "mfpt"
    model = _parse_model(tbl.get("model"), f"{path}.model")
    region = _parse_region(tbl.get("region"), f"{path}.region")
    nodes = _int(tbl, "nodes", path, default=1001)
    field = solve_dirichlet_fd_1d(model, region, nodes)
    _write_csv(os.path.join(args.out, "mfpt_field.csv"), ("x", "v"),
               list(zip(field.grid, field.values)))
    probes = tbl.get("probes", [])
    if not isinstance(probes, list):
        raise ConfigurationError(f"{path}.probes must be a list of numbers")
    probe_rows = []
    if probes:
        n = _int(tbl, "n", path, default=0)
        cfg_sim = _parse_sim_config(tbl, path, args.seed) if n else None
        for x in probes:
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise ConfigurationError(f"{path}.probes entries must be numbers")
            v = field.evaluate(float(x))
            if n:
                est = estimate_expected_exit_mc(model, [float(x)], region, cfg_sim, n,
                                                workers=args.workers)
                z = 0.0 if est.stderr == 0.0 else (est.mean - v) / est.stderr
                probe_rows.append([x, v, est.mean, est.stderr, z])
            else:
                probe_rows.append([x, v, None, None, None])
    _write_csv(os.path.join(args.out, "mfpt_probes.csv"),
               ("x", "v_solver", "mc_mean", "mc_stderr", "z_score"), probe_rows)
    if args.format == "json":
        _write_json(os.path.join(args.out, "mfpt_report.json"), {
            "nodes": nodes,
            "region": region.describe(),
            "probes": [{"x": r[0], "v_solver": r[1], "mc_mean": r[2],
                        "mc_stderr": r[3], "z_score": r[4]} for r in probe_rows],
        })
    print(f"field solved on {nodes} nodes; max value {field.max_value:.6g}")
    return 0


def _resolve_workers(args) -> int:
    if args.workers is not None:
        workers = args.workers
    elif os.environ.get(WORKERS_ENV):
        raw = os.environ[WORKERS_ENV]
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    else:
        workers = 1
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    return workers


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="exitwise",
        description="Exit-time gap bounds for diffusions: simulate coupled "
                    "first exits and compare against expected-exit suprema.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("bound", "evaluate the bound for one scenario"),
            ("sweep", "evaluate the bound across a family of region offsets"),
            ("identities", "check the coupling identities behind the bound"),
            ("mfpt", "solve and probe an expected-exit field"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default: ${WORKERS_ENV} or 1)")
        p.add_argument("--out", default="exitwise_out", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv",
                       help="csv only, or csv plus json mirrors")
    args = parser.parse_args(argv)
    try:
        args.workers = _resolve_workers(args)
        cfg = _load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        handler = {"bound": cmd_bound, "sweep": cmd_sweep,
                   "identities": cmd_identities, "mfpt": cmd_mfpt}[args.command]
        return handler(cfg, args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
