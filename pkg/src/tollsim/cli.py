"""Command-line front end.

Commands
--------
``run --config FILE --out DIR``
    Every policy and seed of the config.  Writes, under ``DIR/<policy>/seed_<s>/``,
    ``trace.csv``, ``tolls.csv`` and ``flows.csv`` (T rows each), plus
    ``DIR/summary.csv`` and ``DIR/metadata.json``.
``sweep --config FILE --horizons T1,T2,... --out DIR``
    Runs each horizon and writes ``DIR/sweep.csv`` with the seed-averaged
    metrics and the log-log slope fits per policy.
``verify [--fast] [--only N ...]``
    Acceptance checks, one pass/fail line each.

Exit codes: 0 success, 1 a verification criterion failed, 2 usage, config or IO error.

CSV schemas (column order is fixed)::

    trace.csv    period, system_cost, oracle_cost, travel_time, revenue, outside,
                 certified_gap, cum_violation_linf
    tolls.csv    period, e0, e1, ...        (toll posted in that period)
    flows.csv    period, e0, e1, ...        (integer edge flows)
    summary.csv  policy, seed, T, regret, certified_regret, violation_linf, violation_l2,
                 normalized_regret, normalized_violation, normalized_travel_time, mean_toll
    sweep.csv    policy, T, seeds, violation_linf, regret, violation_slope, violation_rmse,
                 regret_slope, regret_rmse

Money and other real values carry 6 decimals; missing values are written as ``nan``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

import tollsim
from tollsim.metrics import RunTrace, certified_regret, loglog_slope, normalized_metrics, regret, violation
from tollsim.network import TntpParseError
from tollsim.scenarios import ConfigError, PeriodOracle, ScenarioConfig, build, make_policy, run_experiment

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["period", "system_cost", "oracle_cost", "travel_time", "revenue", "outside",
                 "certified_gap", "cum_violation_linf"]
SUMMARY_COLUMNS = ["policy", "seed", "T", "regret", "certified_regret", "violation_linf", "violation_l2",
                   "normalized_regret", "normalized_violation", "normalized_travel_time", "mean_toll"]
SWEEP_COLUMNS = ["policy", "T", "seeds", "violation_linf", "regret", "violation_slope", "violation_rmse",
                 "regret_slope", "regret_rmse"]


class UsageError(Exception):
    pass


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return "nan" if np.isnan(v) else f"{v:.6f}"


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list, np.ndarray]:
    """Header and float matrix of a numeric CSV written by this module."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)


def cumulative_violation(trace: RunTrace) -> np.ndarray:
    """Per-period L-infinity norm of the positive part of the running excess."""
    excess = np.cumsum(trace.flows - trace.capacity, axis=0)
    return np.maximum(excess, 0.0).max(axis=1, initial=0.0)


def trace_rows(trace: RunTrace):
    gap = trace.certified_gap if trace.certified_gap is not None else np.full(trace.horizon, np.nan)
    rev = trace.revenue if trace.revenue is not None else np.full(trace.horizon, np.nan)
    out = trace.outside if trace.outside is not None else np.full(trace.horizon, np.nan)
    cum = cumulative_violation(trace)
    for i in range(trace.horizon):
        yield [i + 1, trace.system_cost[i], trace.oracle_cost[i], trace.travel_time[i], rev[i],
               int(out[i]) if np.isfinite(out[i]) else np.nan, gap[i], cum[i]]


def edge_header(m):
    return ["period"] + [f"e{e}" for e in range(m)]


def summarise(policy, seed, trace: RunTrace, min_tt) -> list:
    v = violation(trace)
    reg = regret(trace) if trace.oracle_mask.any() else np.nan
    try:
        m = normalized_metrics(trace, min_tt)
        norm = (m.normalized_regret, m.normalized_violation, m.normalized_travel_time)
    except ValueError:
        norm = (np.nan, np.nan, np.nan)
    return [policy, seed, trace.horizon, reg, certified_regret(trace), v.linf, v.l2, *norm, float(trace.tolls.mean())]


def run_all(cfg: ScenarioConfig, horizon: int):
    """Yield ``(policy, seed, trace, setup)`` for every policy and seed of `cfg`."""
    for seed in cfg.seeds:
        setup = build(cfg, seed)
        oracle = PeriodOracle(setup.net) if cfg.oracle_every else None
        for policy in cfg.policies:
            trace = run_experiment(cfg, setup, make_policy(policy, cfg, setup, horizon, seed), horizon, oracle)
            yield policy, seed, trace, setup


def metadata(cfg: ScenarioConfig, extra=None) -> dict:
    d = dict(config=cfg.to_dict(), seeds=list(cfg.seeds), version=tollsim.__version__)
    if extra:
        d.update(extra)
    return d


def cmd_run(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    runs = {}
    for policy, seed, trace, setup in run_all(cfg, cfg.horizon):
        d = out / policy / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        m = trace.flows.shape[1]
        periods = np.arange(1, trace.horizon + 1)
        write_csv(d / "trace.csv", TRACE_COLUMNS, trace_rows(trace))
        write_csv(d / "tolls.csv", edge_header(m), ([p, *row] for p, row in zip(periods, trace.tolls)))
        write_csv(d / "flows.csv", edge_header(m),
                  ([p, *row] for p, row in zip(periods, np.rint(trace.flows).astype(np.int64))))
        summary.append(summarise(policy, seed, trace, setup.min_travel_time))
        runs[f"{policy}/seed_{seed}"] = dict(toll_bound=trace.meta["toll_bound"], step=trace.meta["step"],
                                             users=trace.meta["users"], setup=setup.meta)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    with open(out / "metadata.json", "w") as fh:
        json.dump(metadata(cfg, dict(runs=runs)), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    print_table(SUMMARY_COLUMNS, summary)
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def parse_horizons(text: str) -> list[int]:
    try:
        hs = sorted({int(t) for t in text.replace(" ", "").split(",") if t})
    except ValueError:
        raise UsageError(f"bad horizon list {text!r}") from None
    if len(hs) < 3 or hs[0] < 1:
        raise UsageError("need at least three positive horizons")
    return hs


def sweep_rows(cfg: ScenarioConfig, horizons):
    """Seed-averaged L-infinity violation and regret per (policy, T), with slope fits.

    Regret is the oracle estimate when the config enables the oracle and the
    certified bound otherwise.  The regret fit uses the horizons where the
    mean is positive and needs at least three of them.
    """
    per = {}
    for T in horizons:
        for policy, seed, trace, _ in run_all(replace(cfg, horizon=T), T):
            reg = regret(trace) if trace.oracle_mask.any() else certified_regret(trace)
            per.setdefault(policy, {}).setdefault(T, []).append((violation(trace).linf, reg))
    rows = []
    for policy in cfg.policies:
        means = {T: np.mean(per[policy][T], axis=0) for T in horizons}
        vio = [(T, means[T][0]) for T in horizons if means[T][0] > 0]
        reg = [(T, abs(means[T][1])) for T in horizons if means[T][1] > 0]
        vs, vr = loglog_slope(vio) if len(vio) >= 3 else (np.nan, np.nan)
        rs, rr = loglog_slope(reg) if len(reg) >= 3 else (np.nan, np.nan)
        for T in horizons:
            rows.append([policy, T, len(per[policy][T]), means[T][0], means[T][1], vs, vr, rs, rr])
    return rows


def cmd_sweep(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    horizons = parse_horizons(args.horizons)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep_rows(cfg, horizons)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    with open(out / "metadata.json", "w") as fh:
        json.dump(metadata(cfg, dict(horizons=horizons)), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print_table(SWEEP_COLUMNS, rows)
    return 0


def cmd_verify(args) -> int:
    from tollsim.verify import FAST, FULL, run_criteria

    ok = True
    for res in run_criteria(FAST if args.fast else FULL, args.only):
        print(res.line(), flush=True)
        ok &= res.passed
    return 0 if ok else 1


def print_table(header, rows):
    cells = [header] + [[fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tollsim", description="Online congestion toll simulations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every policy and seed of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="run a config over several horizons and fit log-log slopes")
    s.add_argument("--config", required=True)
    s.add_argument("--horizons", required=True, help="comma-separated list, at least three")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("--fast", action="store_true", help="small seeds and horizons")
    v.add_argument("--only", type=int, nargs="+", choices=range(1, 9), metavar="N", help="criteria to run")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, TntpParseError, OSError) as exc:
        print(f"tollsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
