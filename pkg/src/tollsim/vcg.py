"""VCG payments and whether they can be posted as edge tolls.

On a parallel network every user's payment can be charged as a toll on the
edge they use and the optimal assignment becomes an equilibrium.  On general
networks the payment is still the user's externality but spreading it over
edges can fail; `counterexample_network` builds a three-path instance where
it does.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tollsim.equilibrium import OUTSIDE
from tollsim.lp_oracle import IntegralOptimum, brute_force_optimum
from tollsim.network import Network, enumerate_paths
from tollsim.population import UserBatch

DEVIATION_RTOL = 1e-9


@dataclass(frozen=True)
class ParallelInstance:
    """Parallel edges sorted by latency, users sorted by decreasing VoT, no outside option."""

    latency: np.ndarray
    capacity: np.ndarray
    vot: np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.latency, float)
        cap = np.asarray(self.capacity)
        vot = np.asarray(self.vot, float)
        if len(lat) != len(cap) or len(lat) == 0:
            raise ValueError("need matching, nonempty latency and capacity arrays")
        if np.any(np.diff(lat) < 0):
            raise ValueError("latencies must be sorted ascending")
        if np.any(np.diff(vot) > 0):
            raise ValueError("VoTs must be sorted descending")
        if np.any(cap != np.round(cap)) or np.any(cap < 1):
            raise ValueError("capacities must be positive integers")
        if cap.sum() < len(vot):
            raise ValueError("total capacity is smaller than the number of users")
        object.__setattr__(self, "latency", lat)
        object.__setattr__(self, "capacity", cap.astype(np.int64))
        object.__setattr__(self, "vot", vot)

    @classmethod
    def from_unsorted(cls, latency, capacity, vot):
        order = np.argsort(latency, kind="stable")
        return cls(np.asarray(latency)[order], np.asarray(capacity)[order], -np.sort(-np.asarray(vot, float)))

    def network(self) -> Network:
        return Network.from_edges(2, [(0, 1, float(l), float(c)) for l, c in zip(self.latency, self.capacity)])

    def users(self) -> UserBatch:
        return UserBatch.from_arrays(np.zeros(len(self.vot), np.int64), 1, self.vot, np.inf)

    def assignment(self) -> np.ndarray:
        """Greedy optimum: the highest-VoT users fill the fastest edges."""
        edge_of_slot = np.repeat(np.arange(len(self.latency)), self.capacity)
        return edge_of_slot[:len(self.vot)]


def vcg_payments_parallel(inst: ParallelInstance) -> np.ndarray:
    """Per-user VCG payments on a parallel network.

    A user on edge e pays, for each later used edge e', the VoT of the first
    user on e' times the latency step into e'.  Users on the last used edge
    pay nothing.
    """
    edge = inst.assignment()
    if len(edge) == 0:
        return np.zeros(0)
    last = int(edge[-1])
    first_user = np.concatenate([[0], np.cumsum(inst.capacity)])[:-1]
    # step[k] is the saving when the first user of edge k+1 moves onto edge k
    step = np.zeros(len(inst.latency))
    for k in range(last):
        step[k] = inst.vot[first_user[k + 1]] * (inst.latency[k + 1] - inst.latency[k])
    tail_sum = np.concatenate([np.cumsum(step[::-1])[::-1], [0.0]])
    return tail_sum[edge] - tail_sum[last]


def vcg_tolls_parallel(inst: ParallelInstance) -> np.ndarray:
    """Edge tolls equal to the payment of the users on each edge (0 on unused edges)."""
    pay = vcg_payments_parallel(inst)
    tolls = np.zeros(len(inst.latency))
    tolls[inst.assignment()] = pay
    return tolls


def vcg_payment_general(net: Network, users: UserBatch, u: int, optimum: IntegralOptimum | None = None) -> float:
    """Externality of user u: others' cost in the full optimum minus their optimal cost without u.

    Both optima are exact integral optima, so keep instances tiny.
    """
    full = optimum or brute_force_optimum(net, users)
    if not full.feasible:
        raise ValueError("instance has no capacity-feasible assignment")
    mask = np.ones(len(users), bool)
    mask[u] = False
    without = brute_force_optimum(net, users.subset(mask))
    if not without.feasible:
        raise ValueError("instance without the user is infeasible")
    return float(full.cost - _own_cost(net, users[u], full.assignment[u]) - without.cost)


def _own_cost(net, draw, choice):
    if choice is OUTSIDE:
        return draw.outside
    return draw.vot * float(net.latency[list(choice.edges)].sum())


@dataclass(frozen=True)
class EquilibriumCheck:
    is_equilibrium: bool
    user: int | None = None
    current: object = None
    deviation: object = None
    gain: float = 0.0


def check_vcg_equilibrium(net: Network, users: UserBatch, tolls, assignment=None, path_limit: int = 64) -> EquilibriumCheck:
    """Look for a user who strictly gains by leaving the system-optimal assignment under `tolls`.

    `assignment` defaults to the exact integral optimum.  Returns the first
    profitable deviation found, scanning users in order.
    """
    tolls = np.asarray(tolls, float)
    if assignment is None:
        opt = brute_force_optimum(net, users, path_limit=path_limit)
        if not opt.feasible:
            raise ValueError("instance has no capacity-feasible assignment")
        assignment = opt.assignment
    for u, draw in enumerate(users):
        cur = assignment[u]
        cur_cost = draw.outside if cur is OUTSIDE else (
            draw.vot * net.latency[list(cur.edges)].sum() + tolls[list(cur.edges)].sum())
        options = [(p, draw.vot * p.latency + tolls[list(p.edges)].sum())
                   for p in enumerate_paths(net, draw.origin, draw.destination, limit=path_limit)]
        if np.isfinite(draw.outside):
            options.append((OUTSIDE, draw.outside))
        alt, alt_cost = min(options, key=lambda pc: pc[1])
        if alt_cost < cur_cost - DEVIATION_RTOL * (1 + abs(cur_cost)):
            return EquilibriumCheck(False, u, cur, alt, float(cur_cost - alt_cost))
    return EquilibriumCheck(True)


# edge ids of the three-path counterexample, in network order
COUNTER_EDGES = ("e1", "e2", "e3", "e4", "e5", "e6", "e7")


def counterexample_network(latency=(0.25, 0.25, 0.5, 0.75, 0.75, 1.25, 1.5), big: float = 100.0) -> Network:
    """Single O-D pair (node 0 to node 5) with exactly three routes.

    Routes: P1 = e1 e2 e3, P2 = e4 e5 e3, P3 = e1 e6 e7.  Edges e1 and e3
    have capacity 1 and the rest are effectively uncapacitated.  The default
    latencies give route latencies 1, 2 and 3.
    """
    v1, v2, v3, v4, v5, v6 = range(6)
    arcs = [(v1, v2), (v2, v3), (v3, v6), (v1, v4), (v4, v3), (v2, v5), (v5, v6)]
    caps = [1.0, big, 1.0, big, big, big, big]
    return Network.from_edges(6, [(a, b, float(l), c) for (a, b), l, c in zip(arcs, latency, caps)],
                              name="counterexample")


def counterexample_tolls(net: Network, users: UserBatch) -> tuple[np.ndarray, np.ndarray]:
    """VCG payments of the two users and their edge-toll split.

    Each payment is posted on the capacity-1 edge of its owner's optimal route
    (e3 for the route through e4, e1 for the route through e6).
    Returns ``(payments, tolls)``.
    """
    opt = brute_force_optimum(net, users)
    pay = np.array([vcg_payment_general(net, users, u, opt) for u in range(len(users))])
    tolls = np.zeros(net.edge_count)
    for u, path in enumerate(opt.assignment):
        capped = [e for e in path.edges if net.capacity[e] <= 1]
        tolls[capped[0]] += pay[u]
    return pay, tolls
