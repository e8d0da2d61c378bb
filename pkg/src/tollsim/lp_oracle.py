"""Complete-information optimum: the fractional routing LP, its dual tolls and cross-checks.

The LP routes every user fractionally over paths or the outside option,
minimising VoT-weighted latency plus outside costs subject to edge
capacities.  It is solved by column generation: a restricted master over
the path columns found so far (HiGHS via scipy) and a shortest-path pricing
step under edge weights ``vot * latency + toll``.  Identical users are merged
into one type with a multiplicity, which leaves the LP unchanged.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from tollsim.equilibrium import OUTSIDE
from tollsim.network import Network, cheapest_paths, enumerate_paths
from tollsim.population import UserBatch, UserTypes

REDUCED_COST_TOL = 1e-9
FEAS_TOL = 1e-8


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    ITERATION_LIMIT = "iteration_limit"


class LpInfeasible(RuntimeError):
    """Some user without an outside option cannot be routed within capacity."""


@dataclass(frozen=True, eq=False)
class LpInstance:
    net: Network
    users: UserBatch
    capacity: np.ndarray | None = None

    def __post_init__(self):
        cap = self.net.capacity if self.capacity is None else np.asarray(self.capacity, float)
        if cap.shape != (self.net.edge_count,):
            raise ValueError("need one capacity per edge")
        if np.any(self.users.vot < 0) or np.any(self.users.outside < 0):
            raise ValueError("VoTs and outside costs must be nonnegative")
        object.__setattr__(self, "capacity", cap)


@dataclass(frozen=True, eq=False)
class LpSolution:
    """Optimal (or best-so-far) column solution.

    ``col_type[j]`` is the user type of column j, ``col_edges[j]`` its edge
    tuple (empty for the outside option) and ``flow[j]`` the number of
    users of that type it carries.  ``type_dual`` holds the per-user dual
    of each type's allocation row.
    """

    instance: LpInstance
    types: UserTypes
    col_type: np.ndarray
    col_edges: list
    col_cost: np.ndarray
    flow: np.ndarray
    objective: float
    tolls: np.ndarray
    type_dual: np.ndarray
    status: LpStatus
    iterations: int

    @property
    def user_dual(self) -> np.ndarray:
        return self.type_dual[self.types.inverse]

    @property
    def edge_flows(self) -> np.ndarray:
        x = np.zeros(self.instance.net.edge_count)
        for j, edges in enumerate(self.col_edges):
            if edges:
                x[list(edges)] += self.flow[j]
        return x

    @property
    def outside_flows(self) -> np.ndarray:
        """Per-type number of users on the outside option."""
        out = np.zeros(len(self.types))
        for j, edges in enumerate(self.col_edges):
            if not edges:
                out[self.col_type[j]] += self.flow[j]
        return out

    @property
    def dual_value(self) -> float:
        """Allocation duals summed over users minus capacity-weighted tolls."""
        return float(self.type_dual @ self.types.count - self.tolls @ self.instance.capacity)

    def is_integral(self, tol: float = 1e-8) -> bool:
        return bool(np.all(np.abs(self.flow - np.rint(self.flow)) <= tol))

    def user_assignment(self):
        """Per-user choices (Path or OUTSIDE) when the solution is integral, else None."""
        if not self.is_integral():
            return None
        net = self.instance.net
        queue = {k: [] for k in range(len(self.types))}
        for j, edges in enumerate(self.col_edges):
            n = int(round(self.flow[j]))
            choice = net.path(edges) if edges else OUTSIDE
            queue[int(self.col_type[j])].extend([choice] * n)
        out = []
        for k in self.types.inverse:
            out.append(queue[int(k)].pop())
        return out

    def report(self) -> str:
        net = self.instance.net
        lines = [f"status     {self.status.value}", f"objective  {self.objective:.6f}",
                 f"dual       {self.dual_value:.6f}", f"iterations {self.iterations}",
                 "edge  toll        flow        capacity    slack"]
        x = self.edge_flows
        for e in range(net.edge_count):
            c = self.instance.capacity[e]
            lines.append(f"{e:<5d} {self.tolls[e]:<11.6f} {x[e]:<11.4f} {c:<11.4f} {c - x[e]:.4f}")
        lines.append("type  count  dual")
        for k in range(len(self.types)):
            lines.append(f"{k:<5d} {self.types.count[k]:<6d} {self.type_dual[k]:.6f}")
        return "\n".join(lines)


class _Master:
    """Restricted master problem over a growing column set."""

    def __init__(self, types: UserTypes, capacity, edge_count):
        self.types = types
        self.capacity = capacity
        self.m = edge_count
        self.col_type, self.col_edges, self.col_cost, self.col_art = [], [], [], []
        self.seen = set()

    def add(self, k, edges, cost, artificial=False):
        key = (k, edges, artificial)
        if key in self.seen:
            return False
        self.seen.add(key)
        self.col_type.append(k)
        self.col_edges.append(edges)
        self.col_cost.append(cost)
        self.col_art.append(artificial)
        return True

    def solve(self, phase1: bool):
        n = len(self.col_type)
        art = np.array(self.col_art)
        cost = art.astype(float) if phase1 else np.array(self.col_cost)
        rows_e, cols_e = [], []
        for j, edges in enumerate(self.col_edges):
            rows_e.extend(edges)
            cols_e.extend([j] * len(edges))
        a_ub = sp.csr_matrix((np.ones(len(rows_e)), (rows_e, cols_e)), shape=(self.m, n))
        a_eq = sp.csr_matrix((np.ones(n), (self.col_type, np.arange(n))), shape=(len(self.types), n))
        upper = np.where(art & (not phase1), 0.0, np.inf)
        res = linprog(cost, A_ub=a_ub, b_ub=self.capacity, A_eq=a_eq, b_eq=self.types.count.astype(float),
                      bounds=np.column_stack([np.zeros(n), upper]), method="highs")
        if res.status != 0:
            raise RuntimeError(f"master LP failed: {res.message}")
        tolls = np.maximum(-res.ineqlin.marginals, 0.0)
        return res.x, float(res.fun), tolls, res.eqlin.marginals


def _price(master, inst, types, tolls, mu, phase1):
    vot = np.zeros(len(types)) if phase1 else types.vot
    batch = cheapest_paths(inst.net, types.origin, types.destination, vot, tolls)
    added = 0
    for k in np.flatnonzero(batch.cost - mu < -REDUCED_COST_TOL * (1 + np.abs(mu))):
        edges = tuple(int(e) for e in batch.path_edges(k))
        cost = float(types.vot[k] * inst.net.latency[list(edges)].sum())
        added += master.add(int(k), edges, cost)
    return added


def solve_lp(inst: LpInstance, max_iter: int = 500) -> LpSolution:
    """Optimal fractional routing with dual tolls.

    Users with an infinite outside cost must travel; if capacities make
    that impossible `LpInfeasible` is raised.  Hitting `max_iter` pricing
    rounds returns the last master solution flagged ITERATION_LIMIT.
    """
    net = inst.net
    types = inst.users.types()
    master = _Master(types, inst.capacity, net.edge_count)
    if len(types) == 0:
        return LpSolution(inst, types, np.zeros(0, np.int64), [], np.zeros(0), np.zeros(0), 0.0,
                          np.zeros(net.edge_count), np.zeros(0), LpStatus.OPTIMAL, 0)
    start = cheapest_paths(net, types.origin, types.destination, types.vot)
    needs_art = False
    for k in range(len(types)):
        if np.isfinite(types.outside[k]):
            master.add(k, (), float(types.outside[k]))
        else:
            master.add(k, (), 0.0, artificial=True)
            needs_art = True
        if np.isfinite(start.cost[k]):
            edges = tuple(int(e) for e in start.path_edges(k))
            master.add(k, edges, float(start.cost[k]))
    iterations = 0
    status = LpStatus.OPTIMAL
    for phase1 in ([True, False] if needs_art else [False]):
        while True:
            iterations += 1
            x, obj, tolls, mu = master.solve(phase1)
            if iterations >= max_iter:
                status = LpStatus.ITERATION_LIMIT
                break
            if not _price(master, inst, types, tolls, mu, phase1):
                break
        if phase1 and obj > FEAS_TOL * (1 + types.count.sum()):
            raise LpInfeasible("no capacity-feasible routing for users without an outside option")
        if status is LpStatus.ITERATION_LIMIT:
            if phase1:
                raise LpInfeasible("iteration limit reached before a feasible routing was found")
            break
    art = np.array(master.col_art)
    keep = ~art
    x = np.where(np.abs(x) < 1e-12, 0.0, x)
    return LpSolution(inst, types, np.array(master.col_type, np.int64)[keep],
                      [e for e, a in zip(master.col_edges, art) if not a],
                      np.array(master.col_cost)[keep], x[keep], obj, tolls, np.asarray(mu, float),
                      status, iterations)


def dual_objective(net: Network, users: UserBatch, tolls, capacity=None) -> float:
    """Toll-only dual: cheapest option per user under `tolls`, minus capacity-weighted tolls.

    Concave in the tolls and never above the LP optimum.
    """
    tolls = np.asarray(tolls, float)
    cap = net.capacity if capacity is None else np.asarray(capacity, float)
    types = users.types()
    if len(types) == 0:
        return float(-tolls @ cap)
    batch = cheapest_paths(net, types.origin, types.destination, types.vot, tolls)
    best = np.minimum(batch.cost, types.outside)
    return float(best @ types.count - tolls @ cap)


def _dual_and_flows(net, types, tolls, cap):
    batch = cheapest_paths(net, types.origin, types.destination, types.vot, tolls)
    routed = batch.cost <= types.outside
    best = np.where(routed, batch.cost, types.outside)
    lengths = np.diff(batch.indptr)
    w = np.repeat(np.where(routed, types.count, 0).astype(float), lengths)
    x = np.bincount(batch.edges, weights=w, minlength=net.edge_count)
    return float(best @ types.count - tolls @ cap), x


@dataclass(frozen=True)
class SubgradientResult:
    tolls: np.ndarray
    value: float
    iterations: int
    history: np.ndarray


def subgradient_solve(inst: LpInstance, iters: int = 10_000, schedule: str = "polyak",
                      step: float = 1.0, patience: int = 25) -> SubgradientResult:
    """Maximise the toll-only dual by projected supergradient ascent.

    The supergradient at tau is ``x(tau) - c`` where x are the flows of
    every user's cheapest option.  Schedules:

    ``"polyak"``
        Step toward a target level ``best + delta``; delta starts at
        `step` times the initial duality spread and halves (with a restart
        from the best tolls) after `patience` iterations without progress.
    ``"diminishing"``
        ``step / sqrt(k)``.

    Returns the best tolls seen.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if schedule not in ("polyak", "diminishing"):
        raise ValueError(f"unknown schedule {schedule!r}")
    net, cap = inst.net, inst.capacity
    types = inst.users.types()
    tau = np.zeros(net.edge_count)
    val, x = _dual_and_flows(net, types, tau, cap)
    best_val, best_tau = val, tau.copy()
    # scale of the objective, used to seed the target gap
    delta = step * max(1.0, abs(val), float(np.sum(types.count * np.where(np.isfinite(types.outside), types.outside, 0.0))))
    stall = 0
    history = np.empty(iters)
    k = 0
    for k in range(1, iters + 1):
        g = x - cap
        g = np.where((tau <= 0) & (g < 0), 0.0, g)
        gg = float(g @ g)
        if gg == 0.0:
            history[k - 1] = best_val
            history = history[:k]
            break
        if schedule == "polyak":
            gamma = (best_val + delta - val) / gg
        else:
            gamma = step / np.sqrt(k)
        tau = np.maximum(tau + gamma * g, 0.0)
        val, x = _dual_and_flows(net, types, tau, cap)
        if val > best_val + 1e-12 * (1 + abs(best_val)):
            best_val, best_tau = val, tau.copy()
            stall = 0
        else:
            stall += 1
            if schedule == "polyak" and stall >= patience:
                delta *= 0.5
                stall = 0
                tau = best_tau.copy()
                val, x = _dual_and_flows(net, types, tau, cap)
        history[k - 1] = best_val
    return SubgradientResult(best_tau, best_val, k, history)


@dataclass(frozen=True)
class ClearingReport:
    edge_residual: np.ndarray
    user_residual: np.ndarray
    capacity_excess: np.ndarray

    @property
    def max_residual(self) -> float:
        parts = [np.abs(self.edge_residual), np.abs(self.user_residual), np.maximum(self.capacity_excess, 0)]
        return float(max((p.max() if p.size else 0.0) for p in parts))

    def ok(self, tol: float = 1e-6) -> bool:
        return self.max_residual <= tol


def check_market_clearing(sol: LpSolution) -> ClearingReport:
    """Complementary slackness and per-user optimality residuals of an LP solution.

    ``edge_residual = tau * (c - x)`` and ``user_residual`` is the per-type
    gap between the allocation dual and the cheapest option under the tolls.
    """
    inst = sol.instance
    x = sol.edge_flows
    types = sol.types
    edge_res = sol.tolls * (inst.capacity - x)
    if len(types):
        batch = cheapest_paths(inst.net, types.origin, types.destination, types.vot, sol.tolls)
        best = np.minimum(batch.cost, types.outside)
        user_res = sol.type_dual - best
    else:
        user_res = np.zeros(0)
    return ClearingReport(edge_res, user_res, x - inst.capacity)


@dataclass(frozen=True)
class IntegralOptimum:
    cost: float
    assignment: tuple
    feasible: bool


def brute_force_optimum(net: Network, users: UserBatch, capacity=None, path_limit: int = 64) -> IntegralOptimum:
    """Exact integral optimum by enumerating every user's options.

    Meant for a handful of users on tiny graphs.
    """
    cap = net.capacity if capacity is None else np.asarray(capacity, float)
    options = []
    for d in users:
        paths = enumerate_paths(net, d.origin, d.destination, limit=path_limit)
        if not paths.exhaustive:
            raise ValueError("too many paths for exhaustive search")
        opts = [(p, d.vot * p.latency, p.edges) for p in paths]
        if np.isfinite(d.outside):
            opts.append((OUTSIDE, d.outside, ()))
        options.append(opts)
    best_cost, best = np.inf, None
    for combo in itertools.product(*options):
        cost = sum(c for _, c, _ in combo)
        if cost >= best_cost:
            continue
        load = np.zeros(net.edge_count)
        for _, _, edges in combo:
            load[list(edges)] += 1
        if np.all(load <= cap + FEAS_TOL):
            best_cost, best = cost, combo
    if best is None:
        return IntegralOptimum(np.inf, (), False)
    return IntegralOptimum(float(best_cost), tuple(c for c, _, _ in best), True)
