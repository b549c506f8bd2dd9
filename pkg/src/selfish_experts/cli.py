"""Command-line entry point: rule analysis, table and curve reproductions, free runs.

Exit codes: 0 success, 2 configuration error, 3 audit violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .algorithms import DETERMINISTIC, THETA_RWM
from .experts import HONEST, STRATEGIC
from .harness import AuditViolation, RunConfig, run
from .scoring import builtin, normalize, properness_check, theoretical_lower_bound

log = logging.getLogger("selfish_experts")

OUTPUT_DIR_ENV = "SELFISH_EXPERTS_OUTPUT_DIR"
EXIT_CONFIG = 2
EXIT_AUDIT = 3

TABLE_COLUMNS = (
    ("Beta .1", "beta:0.1"),
    ("Beta .3", "beta:0.3"),
    ("Beta .5", "beta:0.5"),
    ("Beta .7", "beta:0.7"),
    ("Beta .9", "beta:0.9"),
    ("Brier", "brier"),
    ("Spherical", "spherical"),
)
TABLE_ROWS = ("Greedy LB Sim", "LB Simulation", "Lemma LB")

HMM_RULES = (
    ("ratio_standard", "standard", STRATEGIC),
    ("ratio_brier", "brier", HONEST),
    ("ratio_spherical", "spherical", HONEST),
    ("ratio_beta", "beta:0.5", HONEST),
)


class ConfigError(ValueError):
    pass


def fmt(x) -> str:
    """Six significant digits, the fixed numeric format of every CSV cell."""
    if x is None:
        return ""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return f"{x:.6g}"


def _round6(x):
    if x is None or isinstance(x, bool):
        return x
    if isinstance(x, float):
        return float(fmt(x)) if math.isfinite(x) else None
    return x


# ---------------------------------------------------------------------------
# Computations behind the subcommands


def check_rule(identifier: str, eta: float = 0.1, grid_step: float = 1e-2) -> dict:
    rule = builtin(identifier, eta)
    verdict = properness_check(rule, grid_step)
    out = {"rule": identifier, "proper": verdict.proper, "witness": None}
    if verdict.witness is not None:
        b, p = verdict.witness
        out["witness"] = {"belief": _round6(float(b)), "report": _round6(float(p))}
    keys = ("gamma", "mu", "c", "d", "lb_rounded", "lb_unrounded")
    if verdict.proper:
        gaps = theoretical_lower_bound(normalize(rule), check_properness=False).to_dict()
        out.update({k: _round6(gaps[k]) for k in keys})
    else:
        # the lower-bound constants presuppose a proper rule
        out.update({k: None for k in keys})
    return out


def _table_cell(args) -> tuple[str, str, float]:
    row, rule, horizon, eta = args
    env = "greedy-lb" if row == TABLE_ROWS[0] else "sym-lb"
    params = {} if env == "greedy-lb" else {"rounded": False}
    result = run(RunConfig(rule=rule, eta=eta, mode=DETERMINISTIC, environment=env,
                           env_params=params, horizon=horizon))
    return row, rule, result.report.ratio_true


def lower_bound_table(horizon: int = 10_000, eta: float = 1e-4, jobs: int = 1,
                      rows: tuple = TABLE_ROWS) -> dict:
    """{row: {column: value}}; the bound row holds (rounded, unrounded) pairs."""
    table = {row: {} for row in rows}
    if TABLE_ROWS[2] in rows:
        for col, rule in TABLE_COLUMNS:
            gaps = theoretical_lower_bound(normalize(builtin(rule, 0.1)))
            table[TABLE_ROWS[2]][col] = (gaps.lower_bound_rounded, gaps.lower_bound_unrounded)
    tasks = [(row, rule, horizon, eta) for row in rows if row != TABLE_ROWS[2]
             for _, rule in TABLE_COLUMNS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_table_cell, tasks))
    else:
        cells = [_table_cell(t) for t in tasks]
    names = {rule: col for col, rule in TABLE_COLUMNS}
    for row, rule, value in cells:
        table[row][names[rule]] = value
    return table


def hmm_curves(n_experts: int = 10, horizon: int = 10_000, eta: float = 1e-2,
               replicas: int = 30, theta: float = 0.0, seed: int = 0,
               jobs: int = 1) -> dict:
    """Replica-averaged time-averaged ratio per round, one curve per rule."""
    curves = {}
    for column, rule, policy in HMM_RULES:
        config = RunConfig(rule=rule, eta=eta, mode=THETA_RWM, theta=theta, environment="hmm",
                           env_params={"n_experts": n_experts}, policy=policy,
                           horizon=horizon, replicas=replicas, seed=seed)
        curves[column] = run(config, jobs=jobs).ratio_curve()
    curves["best_expert"] = np.ones(horizon)
    return curves


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def parse_run_config(raw: dict, seed: Optional[int] = None) -> RunConfig:
    """Strict parsing: any key that is not a RunConfig field is an error."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = dict(raw)
    if "audit" in values:
        values["audit"] = frozenset(values["audit"])
    if "policy" in values and isinstance(values["policy"], list):
        values["policy"] = tuple(values["policy"])
    if seed is not None:
        values["seed"] = seed
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Output helpers


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _emit(text: str, output_dir: Optional[Path], filename: str) -> None:
    if output_dir is None:
        sys.stdout.write(text)
        return
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / filename).write_text(text)
    log.info("wrote %s", output_dir / filename)


def _output_dir(args) -> Optional[Path]:
    chosen = args.output_dir or os.environ.get(OUTPUT_DIR_ENV)
    return Path(chosen) if chosen else None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Subcommands


def cmd_check_rule(args) -> int:
    try:
        report = check_rule(args.rule, args.eta, args.grid)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(_dumps(report))
    return 0


def cmd_lb_table(args) -> int:
    table = lower_bound_table(args.horizon, args.eta, args.jobs)
    columns = [col for col, _ in TABLE_COLUMNS]
    if args.format == "json":
        out = {row: {col: ([_round6(v) for v in val] if isinstance(val, tuple) else _round6(val))
                     for col, val in cells.items()} for row, cells in table.items()}
        _emit(_dumps(out), _output_dir(args), "lb_table.json")
        return 0
    rows = []
    for row in TABLE_ROWS:
        cells = []
        for col in columns:
            val = table[row][col]
            cells.append(f"{fmt(val[0])} ({fmt(val[1])})" if isinstance(val, tuple) else fmt(val))
        rows.append([row] + cells)
    _emit(_csv_text([""] + columns, rows), _output_dir(args), "lb_table.csv")
    return 0


def cmd_hmm(args) -> int:
    curves = hmm_curves(args.experts, args.horizon, args.eta, args.replicas, args.theta,
                        args.seed, args.jobs)
    header = ["t"] + list(curves)
    idx = np.arange(args.every - 1, args.horizon, args.every)
    if args.format == "json":
        out = {"t": [int(i) + 1 for i in idx]}
        out.update({k: [_round6(float(v[i])) for i in idx] for k, v in curves.items()})
        _emit(_dumps(out), _output_dir(args), "hmm.json")
        return 0
    rows = ([str(i + 1)] + [fmt(curves[k][i]) for k in curves] for i in idx)
    _emit(_csv_text(header, rows), _output_dir(args), "hmm.csv")
    return 0


def cmd_simulate(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
        config = parse_run_config(raw, args.seed)
        config = dataclasses.replace(config, keep_records=True)
        result = run(config)
    except AuditViolation as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (OSError, json.JSONDecodeError, ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = result.report.to_dict()
    out_dir = _output_dir(args)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.write_jsonl(out_dir / "trace.jsonl")
    _emit(_dumps(report), out_dir, "report.json")
    if out_dir is not None:
        sys.stdout.write(_dumps(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfish-experts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, formats=("csv", "json")):
        p.add_argument("--output-dir", help=f"write files here (default ${OUTPUT_DIR_ENV}, else stdout)")
        p.add_argument("--format", choices=formats, default=formats[0])
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("check-rule", help="properness verdict and lower-bound constants")
    p.add_argument("rule")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--grid", type=float, default=1e-2, help="belief grid for the properness scan")
    p.set_defaults(func=cmd_check_rule)

    p = sub.add_parser("lb-table", help="lower-bound comparison table")
    common(p)
    p.add_argument("--horizon", type=int, default=10_000)
    p.add_argument("--eta", type=float, default=1e-4)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_lb_table)

    p = sub.add_parser("hmm", help="regret curves on the hidden Markov data")
    common(p)
    p.add_argument("--experts", type=int, default=10)
    p.add_argument("--horizon", type=int, default=10_000)
    p.add_argument("--eta", type=float, default=1e-2)
    p.add_argument("--replicas", type=int, default=30)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--every", type=int, default=1, help="emit every k-th round")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_hmm)

    p = sub.add_parser("simulate", help="run a JSON-configured experiment")
    common(p, ("json", "jsonl"))
    p.add_argument("config")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is None and args.command == "hmm":
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
