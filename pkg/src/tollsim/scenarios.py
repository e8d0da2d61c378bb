"""Experiment setups and the period loop that ties the modules together.

A run samples users, routes them under the posted tolls, lets the policy
update from the observed flows and, on selected periods, solves the
complete-information LP for the oracle cost.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath

import numpy as np

from tollsim.equilibrium import compute_equilibrium
from tollsim.lp_oracle import LpInstance, LpStatus, solve_lp
from tollsim.metrics import RunTrace
from tollsim.network import Network, load_tntp
from tollsim.population import (PopulationModel, TwoTypePopulation, UserBatch, UserGroup,
                                calibrate_outside_option, period_rng, sample_mean_vots)
from tollsim.toller import (OnlineGradientToller, ReactiveToller, StaticToller, recommended_step,
                            toll_bound)

log = logging.getLogger(__name__)

DATA_ENV = "TOLLSIM_DATA"
KINDS = ("sioux_falls", "lower_bound")
POLICIES = ("online", "reactive", "static_population", "static_group")


class ConfigError(ValueError):
    pass


class TollBoundError(AssertionError):
    """A posted toll left the interval [0, bound]."""

    def __init__(self, period, edge, toll, bound):
        self.period, self.edge, self.toll, self.bound = period, edge, toll, bound
        super().__init__(f"period {period}: toll {toll:.6g} on edge {edge} outside [0, {bound:.6g}]")


@dataclass
class ScenarioConfig:
    """Declarative description of a batch of runs.

    `step` is either a number (dollars per vehicle) or ``"auto"`` for
    1/sqrt(T).  `oracle_every` solves the oracle LP on periods
    1, 1+k, 1+2k, ...; 0 disables the oracle.
    """

    kind: str = "sioux_falls"
    horizon: int = 100
    seeds: list = field(default_factory=lambda: [0])
    policies: list = field(default_factory=lambda: ["online"])
    step: float | str = 5e-4
    increment: float = 0.1
    noise: float = 5e-4
    demand_scale: float = 0.5
    capacity_scale: float = 1.0
    vot_range: tuple = (5.0, 100.0)
    vot_spread: float = 0.2
    vot_draw: str = "group"
    od_resample_prob: float = 0.0
    outside_factor: float = 1.5
    latency_scale: float = 1.0
    oracle_every: int = 1
    users: int = 2
    check_bounds: bool = True
    data_dir: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be at least 1")
        if not self.demand_scale > 0:
            raise ConfigError("demand_scale must be positive")
        if not self.capacity_scale > 0:
            raise ConfigError("capacity_scale must be positive")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}; expected one of {POLICIES}")
        if self.kind == "lower_bound" and set(self.policies) - {"online", "reactive"}:
            raise ConfigError("the lower-bound scenario supports the online and reactive policies only")
        if not (self.step == "auto" or (isinstance(self.step, (int, float)) and self.step > 0)):
            raise ConfigError("step must be 'auto' or a positive number")
        if self.oracle_every < 0:
            raise ConfigError("oracle_every must be nonnegative")
        self.horizon = int(self.horizon)
        self.seeds = [int(s) for s in self.seeds]
        self.vot_range = tuple(float(v) for v in self.vot_range)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vot_range"] = list(self.vot_range)
        return d

    def step_for(self, T: int) -> float:
        return recommended_step(T) if self.step == "auto" else float(self.step)


# --------------------------------------------------------------------------
# Sioux Falls


def data_dir(cfg: ScenarioConfig | None = None):
    if cfg is not None and cfg.data_dir:
        return FsPath(cfg.data_dir)
    if os.environ.get(DATA_ENV):
        return FsPath(os.environ[DATA_ENV])
    return resources.files("tollsim") / "data"


def load_sioux_falls(directory=None, time_scale: float = 1.0):
    """Sioux Falls network and base demand.

    Free-flow times are read as hours; `time_scale` rescales them.
    """
    d = data_dir() if directory is None else FsPath(directory)
    net_text = (d / "SiouxFalls_net.tntp").read_text()
    trips_text = (d / "SiouxFalls_trips.tntp").read_text()
    return load_tntp(net_text, trips_text, time_scale=time_scale, name="SiouxFalls")


@dataclass(frozen=True, eq=False)
class Setup:
    """Everything a batch of runs for one seed needs."""

    net: Network
    population: object
    static_tolls: dict = field(default_factory=dict)
    min_travel_time: float | None = None
    meta: dict = field(default_factory=dict)


def scaled_groups(demand: dict, scale: float, spread: float, resample: float):
    """One group per O-D pair with demand rounded half-up; pairs rounding to 0 are dropped."""
    groups = []
    for (o, d), q in sorted(demand.items()):
        n = int(math.floor(q * scale + 0.5))
        if n >= 1:
            groups.append(UserGroup(len(groups), o, d, n, vot_spread=spread, od_resample_prob=resample))
    return groups


def build_sioux_falls(cfg: ScenarioConfig, seed: int, files=None) -> Setup:
    """Sioux Falls network and calibrated population for one seed, plus the static benchmark tolls.

    Steps: scale demand and capacity, draw the group mean VoTs, solve the
    group-mean LP with travel forced to get reference tolls, set outside
    costs from them, then solve the population-mean and group-mean LPs
    (static benchmarks) and the unit-VoT LP (minimum travel time).
    """
    net, demand = load_sioux_falls(files if files is not None else data_dir(cfg), cfg.latency_scale)
    if cfg.capacity_scale != 1.0:
        net = net.with_capacity(net.capacity * cfg.capacity_scale)
    groups = scaled_groups(demand, cfg.demand_scale, cfg.vot_spread, cfg.od_resample_prob)
    universe = np.array(sorted(demand), dtype=np.int64)
    pop = PopulationModel(tuple(groups), seed=seed, od_universe=universe, vot_draw=cfg.vot_draw)
    pop = sample_mean_vots(pop, *cfg.vot_range)
    forced = solve_lp(LpInstance(net, pop.mean_instance()))
    pop = calibrate_outside_option(pop, net, forced.tolls, cfg.outside_factor)
    group_lp = solve_lp(LpInstance(net, pop.mean_instance()))
    pop_lp = solve_lp(LpInstance(net, pop.mean_instance(pop.population_mean_vot())))
    tt_lp = solve_lp(LpInstance(net, min_travel_time_users(pop.mean_instance())))
    meta = dict(seed=seed, users=pop.user_count, groups=len(groups), edges=net.edge_count,
                population_mean_vot=pop.population_mean_vot(),
                base_demand=float(sum(demand.values())))
    return Setup(net, pop, {"static_group": group_lp.tolls, "static_population": pop_lp.tolls},
                 tt_lp.objective, meta)


def min_travel_time_users(users: UserBatch) -> UserBatch:
    """Same trips with unit VoT and outside costs converted to hours."""
    with np.errstate(divide="ignore", invalid="ignore"):
        hours = np.where(users.vot > 0, users.outside / np.where(users.vot > 0, users.vot, 1.0), 0.0)
    return UserBatch(users.group, users.origin, users.destination, np.ones(len(users)), hours)


# --------------------------------------------------------------------------
# One-edge lower-bound instance

TYPE_I = (1.0, 2.0)
TYPE_II = (0.0, 0.0)


class LowerBoundPopulation(TwoTypePopulation):
    """Two users per period, both type I (v=1, outside 2) or both type II (v=0, outside 0).

    Period types come in counter-keyed blocks so whole sequences can be
    drawn at once.
    """

    block = 1024

    def __init__(self, seed: int = 0, users: int = 2, p_first: float = 0.5):
        super().__init__(users, 0, 1, [TYPE_I, TYPE_II], p_first, seed)

    def _block(self, b):
        cached = getattr(self, "_cache", None)
        if cached is None or cached[0] != b:
            cached = (b, period_rng(self.seed, b).random(self.block) >= self.p_first)
            self._cache = cached
        return cached[1]

    def period_type(self, t: int) -> int:
        return int(self._block(t // self.block)[t % self.block])

    def period_types(self, T: int, start: int = 1) -> np.ndarray:
        """Types (0 = type I, 1 = type II) of periods start .. start+T-1."""
        first, last = start // self.block, (start + T - 1) // self.block
        seq = np.concatenate([self._block(b).copy() for b in range(first, last + 1)]).astype(np.int64)
        off = start - first * self.block
        return seq[off:off + T]


def lower_bound_network() -> Network:
    return Network.from_edges(2, [(0, 1, 1.0, 1.0)], name="one-edge")


def build_lower_bound(cfg: ScenarioConfig | None = None, seed: int = 0) -> Setup:
    users = 2 if cfg is None else cfg.users
    return Setup(lower_bound_network(), LowerBoundPopulation(seed, users), meta=dict(seed=seed, users=users))


def lower_bound_gap(T: int, seeds, users: int = 2) -> np.ndarray:
    """Per-seed ``outside * (S - T)_+`` with S the number of type-I users over T periods.

    Only T type-I users fit through the unit-capacity edge over T periods;
    every extra one takes the outside option.  The mean grows like sqrt(T).
    """
    out = np.empty(len(seeds))
    for i, s in enumerate(seeds):
        n_first = int(np.sum(LowerBoundPopulation(s, users).period_types(T) == 0))
        out[i] = TYPE_I[1] * max(users * n_first - T, 0)
    return out


# --------------------------------------------------------------------------
# Runs


class PeriodOracle:
    """Memoised per-period LP optimum for one population."""

    def __init__(self, net: Network, capacity=None):
        self.net = net
        self.capacity = net.capacity if capacity is None else capacity
        self._by_types: dict = {}
        self.failures = 0

    def __call__(self, users: UserBatch) -> float:
        types = users.types()
        key = b"".join(a.tobytes() for a in (types.origin, types.destination, types.vot, types.outside, types.count))
        if key not in self._by_types:
            sol = solve_lp(LpInstance(self.net, users, self.capacity))
            if sol.status is not LpStatus.OPTIMAL:
                self.failures += 1
            self._by_types[key] = sol.objective
        return self._by_types[key]


def make_policy(name: str, cfg: ScenarioConfig, setup: Setup, T: int, seed: int, record: bool = False):
    m = setup.net.edge_count
    if name == "online":
        return OnlineGradientToller(m, cfg.step_for(T), record=record)
    if name == "reactive":
        return ReactiveToller(m, cfg.increment, record=record)
    if name in setup.static_tolls:
        return StaticToller(setup.static_tolls[name], cfg.noise, seed=seed, record=record)
    raise ConfigError(f"policy {name!r} is not available for this scenario")


def population_toll_bound(population, net: Network) -> float:
    if isinstance(population, PopulationModel):
        lam = max(g.outside_cost for g in population.groups)
    else:
        lam = max(ty[1] for ty in population.types)
    return toll_bound(lam, float(net.capacity.max()), population.user_count)


def run_experiment(cfg: ScenarioConfig, setup: Setup, policy, T: int | None = None,
                   oracle: PeriodOracle | None = None) -> RunTrace:
    """Run `policy` for T periods on `setup` and collect the per-period series.

    The oracle (if given) is evaluated on periods 1, 1+k, 1+2k, ... with
    ``k = cfg.oracle_every``.  With ``cfg.check_bounds`` every posted toll
    (and the final one) is checked against [0, bound] for gradient policies
    whose step is at most 1; a violation raises `TollBoundError`.
    """
    T = cfg.horizon if T is None else int(T)
    net, pop = setup.net, setup.population
    m = net.edge_count
    cap = net.capacity
    bound = population_toll_bound(pop, net)
    check = cfg.check_bounds and isinstance(policy, OnlineGradientToller) and policy.step <= 1
    cost = np.empty(T)
    oracle_cost = np.full(T, np.nan)
    flows = np.empty((T, m))
    tolls = np.empty((T, m))
    tt = np.empty(T)
    revenue = np.empty(T)
    outside = np.empty(T)
    k = cfg.oracle_every
    for i in range(T):
        t = i + 1
        tau = policy.current()
        if check:
            _check_bound(t, tau, bound)
        users = pop.sample_period(t)
        rec = compute_equilibrium(net, users, tau, period=t)
        cost[i] = rec.system_cost
        flows[i] = rec.flows
        tolls[i] = tau
        tt[i] = rec.travel_time
        revenue[i] = rec.revenue
        outside[i] = rec.outside_count
        if oracle is not None and k and i % k == 0:
            oracle_cost[i] = oracle(users)
        policy.update(cap, rec.flows)
    if check:
        _check_bound(T + 1, policy.current(), bound)
    meta = dict(T=T, toll_bound=bound, final_tolls=policy.current().copy(),
                step=getattr(policy, "step", None), policy=policy.kind.value,
                users=pop.user_count)
    return RunTrace(cap, cost, oracle_cost, flows, tolls, tt, revenue, outside, meta=meta)


def _check_bound(t, tau, bound):
    bad = (tau < 0) | (tau > bound)
    if np.any(bad):
        e = int(np.argmax(bad))
        raise TollBoundError(t, e, float(tau[e]), bound)


def build(cfg: ScenarioConfig, seed: int) -> Setup:
    if cfg.kind == "sioux_falls":
        return build_sioux_falls(cfg, seed)
    return build_lower_bound(cfg, seed)


# --------------------------------------------------------------------------
# Small random instances for property checks


def random_small_instance(rng: np.random.Generator, max_nodes: int = 4, max_edges: int = 6, max_users: int = 4):
    """Random tiny network with a few users that all have a route.

    Returns ``(net, users)``.  Outside costs are finite, so every instance
    has a capacity-feasible assignment.
    """
    while True:
        n = int(rng.integers(2, max_nodes + 1))
        m = int(rng.integers(1, max_edges + 1))
        arcs = []
        for _ in range(m):
            a, b = rng.choice(n, size=2, replace=False)
            arcs.append((int(a), int(b), float(rng.integers(1, 10)) / 2, float(rng.integers(1, 3))))
        net = Network.from_edges(n, arcs)
        pairs = [(o, d) for o in range(n) for d in range(n) if o != d and _reachable(net, o, d)]
        if not pairs:
            continue
        k = int(rng.integers(1, max_users + 1))
        pick = rng.integers(0, len(pairs), size=k)
        o = np.array([pairs[p][0] for p in pick])
        d = np.array([pairs[p][1] for p in pick])
        vot = rng.integers(0, 6, size=k).astype(float)
        lam = rng.integers(1, 12, size=k).astype(float)
        return net, UserBatch.from_arrays(o, d, vot, lam)


def _reachable(net, o, d):
    seen, stack = {o}, [o]
    while stack:
        v = stack.pop()
        for e in net.out_edge_ids(v):
            h = int(net.head[e])
            if h not in seen:
                seen.add(h)
                stack.append(h)
    return d in seen


def random_parallel_instance(rng: np.random.Generator, max_edges: int = 4, max_users: int = 5):
    """Parallel instance with distinct latencies and VoTs so the optimum is unique."""
    from tollsim.vcg import ParallelInstance

    m = int(rng.integers(1, max_edges + 1))
    lat = np.sort(rng.choice(np.arange(1, 50), size=m, replace=False) / 4.0)
    cap = rng.integers(1, 3, size=m)
    n = int(rng.integers(1, min(max_users, int(cap.sum())) + 1))
    vot = -np.sort(-(rng.choice(np.arange(1, 200), size=n, replace=False) / 8.0))
    return ParallelInstance(lat, cap, vot)
