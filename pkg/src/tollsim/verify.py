"""Acceptance checks, shared by ``tollsim verify`` and the test suite.

Each ``criterion_N`` function computes its quantities from scratch and
returns a `CheckResult` whose ``values`` hold the raw numbers, so callers
can assert their own thresholds.  `Scale` controls seeds and horizons;
`FULL` is the acceptance scale and `FAST` a smoke-test scale.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from tollsim.equilibrium import compute_equilibrium
from tollsim.lp_oracle import (LpInstance, LpStatus, brute_force_optimum, check_market_clearing, dual_objective,
                               solve_lp, subgradient_solve)
from tollsim.metrics import (certified_regret, loglog_slope, normalized_metrics, regret, regret_bound, violation,
                             violation_bound)
from tollsim.scenarios import (POLICIES, PeriodOracle, ScenarioConfig, TollBoundError, build_lower_bound,
                               build_sioux_falls, lower_bound_gap, make_policy, random_parallel_instance,
                               random_small_instance, run_experiment)
from tollsim.population import UserBatch
from tollsim.toller import OnlineGradientToller
from tollsim.vcg import (check_vcg_equilibrium, counterexample_network, counterexample_tolls,
                         vcg_payment_general, vcg_payments_parallel, vcg_tolls_parallel)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scale:
    sweep_horizons: tuple = (100, 200, 500, 1000, 2000, 5000)
    sweep_seeds: tuple = tuple(range(10))
    sweep_oracle_solves: int = 2
    lb_horizons: tuple = (100, 1000, 10_000)
    lb_seeds: tuple = tuple(range(5))
    random_instances: int = 200
    gap_seeds: int = 1000
    bench_horizon: int = 2000
    bench_seeds: tuple = tuple(range(10))
    bench_oracle_every: int = 200
    parallel_instances: int = 100
    cross_instances: int = 50
    subgradient_iters: int = 10_000


FULL = Scale()
FAST = Scale(sweep_horizons=(100, 200, 500, 1000), sweep_seeds=(0, 1), lb_horizons=(100, 1000, 3000),
             lb_seeds=(0, 1), random_instances=60, bench_horizon=500, bench_seeds=(0, 1), bench_oracle_every=100,
             parallel_instances=40, cross_instances=15, subgradient_iters=5000)


@dataclass
class CheckResult:
    key: int
    title: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] criterion {self.key} ({self.title}): {self.detail} [{self.seconds:.0f}s]"


# --------------------------------------------------------------------------
# Scenario configs


def sweep_config(**overrides) -> ScenarioConfig:
    """Reduced Sioux Falls with O-D resampling and step 1/sqrt(T)."""
    base = dict(kind="sioux_falls", demand_scale=0.1, capacity_scale=0.2, od_resample_prob=0.2,
                step="auto", policies=["online"], check_bounds=False)
    return ScenarioConfig(**{**base, **overrides})


def bench_config(scale: Scale = FULL, **overrides) -> ScenarioConfig:
    """Reduced Sioux Falls with fixed O-D pairs, default step, all four policies."""
    base = dict(kind="sioux_falls", demand_scale=0.1, capacity_scale=0.2, od_resample_prob=0.0,
                horizon=scale.bench_horizon, seeds=list(scale.bench_seeds), policies=list(POLICIES),
                oracle_every=scale.bench_oracle_every)
    return ScenarioConfig(**{**base, **overrides})


# --------------------------------------------------------------------------
# Shared runs for criteria 1-3


@dataclass
class RunSummary:
    scenario: str
    T: int
    seed: int
    linf: float
    l2: float
    regret_lp: float
    certified: float
    regret_bound: float
    violation_bound: float
    max_toll: float
    min_toll: float
    toll_bound: float

    @property
    def toll_ok(self) -> bool:
        return self.min_toll >= 0 and self.max_toll <= self.toll_bound


def _summarise(scenario, T, seed, trace, setup, max_outside):
    v = violation(trace)
    cap = float(setup.net.capacity.max())
    users = trace.meta["users"]
    all_tolls = np.vstack([trace.tolls, trace.meta["final_tolls"][None, :]])
    return RunSummary(
        scenario, T, seed, v.linf, v.l2,
        regret(trace) if trace.oracle_mask.any() else float("nan"),
        certified_regret(trace),
        regret_bound(setup.net.edge_count, users, cap, T),
        violation_bound(setup.net.edge_count, users, cap, max_outside, T),
        float(all_tolls.max()), float(all_tolls.min()), trace.meta["toll_bound"])


def sweep_runs(horizons, seeds, oracle_solves: int = 2, cfg: ScenarioConfig | None = None, policy_factory=None):
    """Online runs of the reduced Sioux Falls sweep, one per (seed, T)."""
    cfg = cfg or sweep_config()
    out = []
    for seed in seeds:
        setup = build_sioux_falls(cfg, seed)
        oracle = PeriodOracle(setup.net)
        max_outside = max(g.outside_cost for g in setup.population.groups)
        for T in horizons:
            run_cfg = replace(cfg, oracle_every=max(1, -(-T // oracle_solves)) if oracle_solves else 0)
            policy = (policy_factory or _online)(setup.net.edge_count, run_cfg.step_for(T))
            trace = run_experiment(run_cfg, setup, policy, T, oracle if oracle_solves else None)
            out.append(_summarise("sioux_falls", T, seed, trace, setup, max_outside))
            log.info("sweep seed=%d T=%d linf=%.1f", seed, T, out[-1].linf)
    return out


def lower_bound_runs(horizons, seeds, policy_factory=None):
    """Online runs on the one-edge instance with step 1/sqrt(T) and the exact LP oracle every period."""
    cfg = ScenarioConfig(kind="lower_bound", step="auto", check_bounds=False)
    out = []
    for seed in seeds:
        setup = build_lower_bound(cfg, seed)
        oracle = PeriodOracle(setup.net)
        for T in horizons:
            policy = (policy_factory or _online)(setup.net.edge_count, cfg.step_for(T))
            trace = run_experiment(cfg, setup, policy, T, oracle)
            out.append(_summarise("lower_bound", T, seed, trace, setup, 2.0))
    return out


def _online(m, step):
    return OnlineGradientToller(m, step)


class _Cache:
    """Sweep results reused across criteria 1-3 within one verification pass."""

    def __init__(self, scale: Scale):
        self.scale = scale
        self._sweep = None
        self._lb = None

    def sweep(self):
        if self._sweep is None:
            s = self.scale
            self._sweep = sweep_runs(s.sweep_horizons, s.sweep_seeds, s.sweep_oracle_solves)
        return self._sweep

    def lower_bound(self):
        if self._lb is None:
            self._lb = lower_bound_runs(self.scale.lb_horizons, self.scale.lb_seeds)
        return self._lb


# --------------------------------------------------------------------------
# Criteria


def slope_of_runs(runs):
    """Mean L-infinity violation per horizon and the log-log fit through it."""
    horizons = sorted({r.T for r in runs})
    means = [float(np.mean([r.linf for r in runs if r.T == T])) for T in horizons]
    if min(means) <= 0:
        return horizons, means, float("nan"), float("nan")
    slope, rmse = loglog_slope(zip(horizons, means))
    return horizons, means, slope, rmse


def criterion_1(scale: Scale = FULL, cache: _Cache | None = None, runs=None) -> CheckResult:
    runs = runs if runs is not None else (cache or _Cache(scale)).sweep()
    horizons, means, slope, rmse = slope_of_runs(runs)
    ok = bool(np.isfinite(slope) and 0.35 <= slope <= 0.65 and rmse < 0.1)
    pts = ", ".join(f"{T}:{m:.1f}" for T, m in zip(horizons, means))
    return CheckResult(1, "sqrt(T) violation scaling", ok,
                       f"slope {slope:.3f} in [0.35, 0.65], rmse {rmse:.3f} < 0.1; mean Linf {pts}",
                       dict(horizons=horizons, means=means, slope=slope, rmse=rmse))


def criterion_2(scale: Scale = FULL, cache: _Cache | None = None) -> CheckResult:
    cache = cache or _Cache(scale)
    runs = cache.sweep() + cache.lower_bound()
    bad = []
    worst_r = worst_v = 0.0
    for r in runs:
        # the certified gap bounds the LP regret from above in every period
        reg = max(r.certified, r.regret_lp if np.isfinite(r.regret_lp) else -np.inf)
        worst_r = max(worst_r, reg / r.regret_bound)
        worst_v = max(worst_v, r.l2 / r.violation_bound)
        if reg > r.regret_bound or r.l2 > r.violation_bound:
            bad.append((r.scenario, r.T, r.seed))
    return CheckResult(2, "regret and violation bounds", not bad,
                       f"{len(runs)} runs, {len(bad)} violations; worst regret/bound {worst_r:.2e}, "
                       f"worst L2/bound {worst_v:.2e}",
                       dict(runs=len(runs), violations=bad, worst_regret_ratio=worst_r, worst_violation_ratio=worst_v))


def projection_mutation_detected(T: int = 50, seed: int = 0) -> bool:
    """Run the sweep scenario without the projection and report whether the bound check fires.

    Edges below capacity push unprojected tolls negative within a few periods.
    """
    cfg = sweep_config(check_bounds=True)
    setup = build_sioux_falls(cfg, seed)
    policy = OnlineGradientToller(setup.net.edge_count, cfg.step_for(T), project=False)
    try:
        run_experiment(cfg, setup, policy, T)
    except TollBoundError:
        return True
    return False


def criterion_3(scale: Scale = FULL, cache: _Cache | None = None) -> CheckResult:
    cache = cache or _Cache(scale)
    runs = cache.sweep() + cache.lower_bound()
    bad = [(r.scenario, r.T, r.seed) for r in runs if not r.toll_ok]
    worst = max(r.max_toll / r.toll_bound for r in runs)
    caught = projection_mutation_detected()
    return CheckResult(3, "toll boundedness", not bad and caught,
                       f"{len(runs)} runs, {len(bad)} out-of-bound; max toll/bound {worst:.3f}; "
                       f"projection mutation {'caught' if caught else 'NOT caught'}",
                       dict(runs=len(runs), violations=bad, worst_ratio=worst, mutation_caught=caught))


def criterion_4(scale: Scale = FULL) -> CheckResult:
    worst_gap = worst_res = 0.0
    integral = matched = 0
    failures = []
    # half unrestricted draws, half with a binding capacity
    half = scale.random_instances // 2
    pool = [(k, None) for k in range(scale.random_instances - half)]
    pool += list(enumerate(congested_instances(half, 10_000), start=len(pool)))
    congested = 0
    for k, item in pool:
        if item is None:
            net, users = random_small_instance(np.random.default_rng(10_000 + k))
            sol = solve_lp(LpInstance(net, users))
        else:
            sol = item[1]
            net, users = item[0].net, item[0].users
        congested += bool(np.any(sol.tolls > 1e-9))
        gap = abs(sol.objective - sol.dual_value) / (1 + abs(sol.objective))
        res = check_market_clearing(sol).max_residual
        worst_gap, worst_res = max(worst_gap, gap), max(worst_res, res)
        if sol.status is not LpStatus.OPTIMAL or gap > 1e-6 or res > 1e-6:
            failures.append(k)
            continue
        assignment = sol.user_assignment()
        if assignment is None:
            continue
        integral += 1
        rec = compute_equilibrium(net, users, sol.tolls, prefer=assignment)
        ip = brute_force_optimum(net, users)
        if abs(rec.system_cost - ip.cost) <= 1e-9 * (1 + abs(ip.cost)) and np.all(rec.flows <= net.capacity):
            matched += 1
        else:
            failures.append(k)
    ok = not failures
    return CheckResult(4, "market clearing", ok,
                       f"{scale.random_instances} instances ({congested} congested), max duality gap {worst_gap:.1e}, "
                       f"max residual {worst_res:.1e}, integral {integral} of which {matched} match the IP optimum",
                       dict(instances=scale.random_instances, congested=congested, worst_gap=worst_gap, worst_residual=worst_res,
                            integral=integral, matched=matched, failures=failures))


def criterion_5(scale: Scale = FULL) -> CheckResult:
    horizons = (100, 1000, 10_000)
    seeds = range(scale.gap_seeds)
    means = [float(lower_bound_gap(T, seeds).mean()) for T in horizons]
    slope, rmse = loglog_slope(zip(horizons, means))
    ok = abs(slope - 0.5) <= 0.05
    pts = ", ".join(f"{T}:{m:.2f}" for T, m in zip(horizons, means))
    return CheckResult(5, "regret lower bound", ok,
                       f"slope {slope:.3f} within 0.5 +- 0.05 over {scale.gap_seeds} seeds; mean gap {pts}",
                       dict(horizons=horizons, means=means, slope=slope, rmse=rmse))


def benchmark_metrics(cfg: ScenarioConfig):
    """Per-policy normalized metrics averaged over the config's seeds."""
    rows = {p: [] for p in cfg.policies}
    for seed in cfg.seeds:
        setup = build_sioux_falls(cfg, seed)
        oracle = PeriodOracle(setup.net)
        for p in cfg.policies:
            trace = run_experiment(cfg, setup, make_policy(p, cfg, setup, cfg.horizon, seed), cfg.horizon, oracle)
            m = normalized_metrics(trace, setup.min_travel_time)
            rows[p].append((m.normalized_regret, m.normalized_violation, m.normalized_travel_time))
            log.info("bench seed=%d %s %s", seed, p, rows[p][-1])
    return {p: dict(zip(("regret", "violation", "travel_time"), np.mean(v, axis=0).tolist()))
            for p, v in rows.items()}


def criterion_6(scale: Scale = FULL, cfg: ScenarioConfig | None = None) -> CheckResult:
    means = benchmark_metrics(cfg or bench_config(scale))
    on = means["online"]
    checks = dict(
        regret_vs_static_population=on["regret"] <= means["static_population"]["regret"],
        regret_vs_static_group=on["regret"] <= means["static_group"]["regret"],
        violation_vs_reactive=on["violation"] <= means["reactive"]["violation"],
        travel_time_within_10pct=abs(on["travel_time"] - 1.0) <= 0.10,
    )
    detail = "; ".join(f"{p} regret {m['regret']:+.4f} viol {m['violation']:.4f} ttt {m['travel_time']:.3f}"
                       for p, m in means.items())
    failed = [k for k, v in checks.items() if not v]
    if failed:
        detail += "; failed: " + ", ".join(failed)
    return CheckResult(6, "benchmark ordering", all(checks.values()), detail, dict(means=means, checks=checks))


def criterion_7(scale: Scale = FULL) -> CheckResult:
    worst = 0.0
    bad = []
    for k in range(scale.parallel_instances):
        inst = random_parallel_instance(np.random.default_rng(20_000 + k), max_users=4)
        pay = vcg_payments_parallel(inst)
        net, users = inst.network(), inst.users()
        opt = brute_force_optimum(net, users)
        general = np.array([vcg_payment_general(net, users, u, opt) for u in range(len(users))])
        worst = max(worst, float(np.max(np.abs(general - pay))))
        edge = inst.assignment()
        constant = all(np.ptp(pay[edge == e]) <= 1e-9 for e in np.unique(edge))
        last_free = np.all(pay[edge == edge[-1]] == 0)
        eq = check_vcg_equilibrium(net, users, vcg_tolls_parallel(inst),
                                   [net.path([int(e)]) for e in edge]).is_equilibrium
        if worst > 1e-9 or not (constant and last_free and eq):
            bad.append(k)
    cnet = counterexample_network()
    cusers = UserBatch.from_arrays([0, 0], 5, [10.0, 1.0], np.inf)
    _, ctolls = counterexample_tolls(cnet, cusers)
    check = check_vcg_equilibrium(cnet, cusers, ctolls)
    counter_ok = (not check.is_equilibrium) and check.user == 1
    ok = not bad and counter_ok
    return CheckResult(7, "VCG", ok,
                       f"{scale.parallel_instances} parallel instances, {len(bad)} failing, max payment diff "
                       f"{worst:.1e}; counterexample deviation by user {check.user} gaining {check.gain:.2f}",
                       dict(failures=bad, worst_diff=worst, counter_user=check.user, counter_gain=check.gain))


def congested_instances(n: int, seed: int, max_users: int = 6):
    """First n random small instances whose LP optimum posts a positive toll."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        net, users = random_small_instance(rng, max_users=max_users)
        inst = LpInstance(net, users)
        sol = solve_lp(inst)
        if np.any(sol.tolls > 1e-9):
            out.append((inst, sol))
    return out


def criterion_8(scale: Scale = FULL) -> CheckResult:
    worst_sub = worst_strong = 0.0
    bad = []
    for k, (inst, sol) in enumerate(congested_instances(scale.cross_instances, 30_000)):
        net, users = inst.net, inst.users
        sub = subgradient_solve(inst, iters=scale.subgradient_iters)
        d_sub = abs(sub.value - sol.objective) / (abs(sol.objective) + 1)
        d_strong = abs(dual_objective(net, users, sol.tolls) - sol.objective) / (abs(sol.objective) + 1)
        worst_sub, worst_strong = max(worst_sub, d_sub), max(worst_strong, d_strong)
        if d_sub > 1e-3 or d_strong > 1e-6:
            bad.append(k)
    return CheckResult(8, "solver cross-check", not bad,
                       f"{scale.cross_instances} instances, max subgradient gap {worst_sub:.1e} (<= 1e-3), "
                       f"max strong-duality gap {worst_strong:.1e} (<= 1e-6)",
                       dict(failures=bad, worst_subgradient=worst_sub, worst_strong=worst_strong))


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
            5: criterion_5, 6: criterion_6, 7: criterion_7, 8: criterion_8}
_CACHED = {1, 2, 3}


def run_criteria(scale: Scale = FULL, only=None):
    """Yield a `CheckResult` per criterion, in order; an exception is reported as a failure."""
    cache = _Cache(scale)
    for key in sorted(only or CRITERIA):
        start = time.perf_counter()
        fn = CRITERIA[key]
        try:
            res = fn(scale, cache) if key in _CACHED else fn(scale)
        except Exception as exc:  # a crash counts as a failed criterion
            log.exception("criterion %d raised", key)
            res = CheckResult(key, fn.__name__, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - start
        yield res
