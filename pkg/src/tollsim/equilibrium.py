"""Users' best responses to a toll vector and the induced edge flows.

Each user takes the cheapest path under ``vot * latency + toll`` or the
outside option, whichever is cheaper; an exact tie goes to the path.
Routing ignores capacities entirely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tollsim.network import Network, Path, PathBatch, cheapest_paths
from tollsim.population import UserBatch, UserDraw, UserTypes


class _Outside:
    __slots__ = ()

    def __repr__(self):
        return "OUTSIDE"

    def __reduce__(self):
        return "OUTSIDE"


OUTSIDE = _Outside()

# path-vs-preferred tie tolerance, relative to the cost scale
PREFER_RTOL = 1e-9


def check_tolls(tolls, edge_count: int) -> np.ndarray:
    tolls = np.asarray(tolls, dtype=float)
    if tolls.shape != (edge_count,):
        raise ValueError(f"expected {edge_count} tolls, got shape {tolls.shape}")
    if np.any(tolls < 0) or not np.all(np.isfinite(tolls)):
        raise ValueError("tolls must be finite and nonnegative")
    return tolls


def best_response(net: Network, draw: UserDraw, tolls, prefer=None):
    """Cheapest option for one user: ``(Path or OUTSIDE, cost)``."""
    rec = compute_equilibrium(net, UserBatch.from_draws([draw]), tolls,
                              prefer=None if prefer is None else [prefer])
    return rec.choice(0), float(rec.user_cost[0])


@dataclass(frozen=True, eq=False)
class AssignmentRecord:
    """Outcome of one period's routing.

    Choices are stored per user type; ``types.inverse`` maps users to types.
    Users that take the outside option have an empty path slot.
    """

    period: int
    net: Network
    users: UserBatch
    types: UserTypes
    paths: PathBatch
    outside: np.ndarray
    type_cost: np.ndarray
    flows: np.ndarray
    system_cost: float
    travel_time: float
    revenue: float

    @property
    def user_cost(self) -> np.ndarray:
        return self.type_cost[self.types.inverse]

    @property
    def outside_count(self) -> int:
        return int(self.types.count[self.outside].sum())

    def choice(self, u: int):
        k = int(self.types.inverse[u])
        if self.outside[k]:
            return OUTSIDE
        return self.net.path(self.paths.path_edges(k))

    def choices(self) -> list:
        return [self.choice(u) for u in range(len(self.users))]


def outside_hours(vot, outside):
    """Travel-time equivalent of the outside option, ``outside / vot`` (0 when both vanish)."""
    vot = np.asarray(vot, float)
    outside = np.asarray(outside, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(vot > 0, outside / np.where(vot > 0, vot, 1.0), np.where(outside > 0, np.inf, 0.0))
    return h


def compute_equilibrium(net: Network, users: UserBatch, tolls, prefer=None, period: int = 0) -> AssignmentRecord:
    """Route every user to their cheapest option under `tolls`.

    Parameters
    ----------
    prefer : sequence, optional
        Per-user tie-break hints (a Path, OUTSIDE or None).  A user takes the
        hinted option whenever it is optimal up to a 1e-9 relative tolerance.
        Hints force per-user evaluation, so use them on small instances only.
    """
    tolls = check_tolls(tolls, net.edge_count)
    if prefer is not None:
        return _equilibrium_with_hints(net, users, tolls, prefer, period)
    types = users.types()
    batch = cheapest_paths(net, types.origin, types.destination, types.vot, tolls)
    # a tie between path and outside option goes to the path
    outside = batch.cost > types.outside
    cost = np.where(outside, types.outside, batch.cost)
    routed = ~outside
    paths = _drop(batch, routed)
    flows = paths.edge_loads(types.count, net.edge_count)
    weights = types.count.astype(float)
    lat = np.where(routed, paths_latency(paths, net), 0.0)
    system_cost = float(np.sum(weights * np.where(routed, types.vot * lat, types.outside)))
    travel_time = float(np.sum(weights * np.where(routed, lat, outside_hours(types.vot, types.outside))))
    revenue = float(np.dot(tolls, flows))
    return AssignmentRecord(period, net, users, types, paths, outside, cost,
                            np.rint(flows).astype(np.int64), system_cost, travel_time, revenue)


def paths_latency(paths: PathBatch, net: Network) -> np.ndarray:
    lengths = np.diff(paths.indptr)
    seg = np.repeat(np.arange(len(lengths)), lengths)
    return np.bincount(seg, weights=net.latency[paths.edges], minlength=len(lengths))


def _drop(batch: PathBatch, keep) -> PathBatch:
    """Empty the path slots of queries not in `keep`."""
    lengths = np.diff(batch.indptr)
    keep_len = np.where(keep, np.maximum(lengths, 0), 0)
    mask = np.repeat(keep, np.maximum(lengths, 0))
    indptr = np.zeros(len(lengths) + 1, np.int64)
    np.cumsum(keep_len, out=indptr[1:])
    return PathBatch(np.where(keep, batch.cost, np.inf), np.where(keep, batch.latency, np.inf),
                     indptr, batch.edges[mask])


def _equilibrium_with_hints(net, users, tolls, prefer, period):
    n = len(users)
    if len(prefer) != n:
        raise ValueError("need one hint per user")
    # every user becomes its own type so hints can differ between identical users
    idx = np.arange(n, dtype=np.int64)
    types = UserTypes(users.origin, users.destination, users.vot, users.outside, np.ones(n, np.int64), idx)
    batch = cheapest_paths(net, users.origin, users.destination, users.vot, tolls)
    seqs, outside, cost = [], np.zeros(n, bool), np.zeros(n)
    for u in range(n):
        best = min(batch.cost[u], users.outside[u])
        choice = tuple(batch.path_edges(u)) if batch.cost[u] <= users.outside[u] else None
        hint = prefer[u]
        tol = PREFER_RTOL * (1 + abs(best))
        if hint is OUTSIDE:
            if users.outside[u] <= best + tol:
                choice = None
        elif hint is not None:
            edges = list(hint.edges if isinstance(hint, Path) else hint)
            c = users.vot[u] * net.latency[edges].sum() + tolls[edges].sum()
            if (hint.origin if isinstance(hint, Path) else net.tail[edges[0]]) == users.origin[u] and c <= best + tol:
                choice = tuple(int(e) for e in edges)
        if choice is None:
            outside[u] = True
            cost[u] = users.outside[u]
            seqs.append(())
        else:
            seqs.append(choice)
            cost[u] = users.vot[u] * net.latency[list(choice)].sum() + tolls[list(choice)].sum()
    lengths = np.array([len(s) for s in seqs], np.int64)
    indptr = np.zeros(n + 1, np.int64)
    np.cumsum(lengths, out=indptr[1:])
    flat = np.array([e for s in seqs for e in s], np.int64)
    lat = np.array([net.latency[list(s)].sum() if s else 0.0 for s in seqs])
    paths = PathBatch(np.where(outside, np.inf, cost), np.where(outside, np.inf, lat), indptr, flat)
    flows = np.bincount(flat, minlength=net.edge_count).astype(np.int64)
    system_cost = float(np.sum(np.where(outside, users.outside, users.vot * lat)))
    travel_time = float(np.sum(np.where(outside, outside_hours(users.vot, users.outside), lat)))
    return AssignmentRecord(period, net, users, types, paths, outside, cost, flows,
                            system_cost, travel_time, float(np.dot(tolls, flows)))
