"""User groups and the per-period i.i.d. draws of trips, values of time and outside options.

Per-period randomness comes from a generator keyed by ``(seed, t)``, so the
draws of period t never depend on which other periods were sampled first.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from tollsim.network import Network, cheapest_paths, factorize_rows

# spawn-key tags separating the independent random streams of one seed
_STREAM_PERIOD = 0
_STREAM_MEAN_VOT = 1


def period_rng(seed: int, t: int, stream: int = _STREAM_PERIOD) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, t)))


@dataclass(frozen=True)
class UserGroup:
    """Users sharing a default O-D pair, a mean value of time and an outside cost."""

    id: int
    origin: int
    destination: int
    demand: int
    mean_vot: float = 1.0
    vot_spread: float = 0.2
    od_resample_prob: float = 0.0
    outside_cost: float = np.inf

    def __post_init__(self):
        if self.demand < 1:
            raise ValueError(f"group {self.id}: demand must be at least 1")
        if not self.mean_vot > 0:
            raise ValueError(f"group {self.id}: mean VoT must be positive")
        if not 0 <= self.vot_spread < 1:
            raise ValueError(f"group {self.id}: vot_spread must lie in [0, 1)")
        if not 0 <= self.od_resample_prob <= 1:
            raise ValueError(f"group {self.id}: od_resample_prob must lie in [0, 1]")
        if self.outside_cost < 0:
            raise ValueError(f"group {self.id}: outside cost must be nonnegative")

    @property
    def od(self) -> tuple[int, int]:
        return (self.origin, self.destination)


class UserDraw(NamedTuple):
    group: int
    origin: int
    destination: int
    vot: float
    outside: float


class UserTypes(NamedTuple):
    """Distinct (origin, destination, vot, outside) combinations with multiplicities.

    Types are numbered in order of first appearance; ``inverse[u]`` is the
    type index of user u.
    """

    origin: np.ndarray
    destination: np.ndarray
    vot: np.ndarray
    outside: np.ndarray
    count: np.ndarray
    inverse: np.ndarray

    def __len__(self):
        return len(self.count)


@dataclass(frozen=True, eq=False)
class UserBatch:
    """Columnar collection of user draws for one period."""

    group: np.ndarray
    origin: np.ndarray
    destination: np.ndarray
    vot: np.ndarray
    outside: np.ndarray

    def __post_init__(self):
        n = len(self.group)
        for name in ("origin", "destination", "vot", "outside"):
            if len(getattr(self, name)) != n:
                raise ValueError("user arrays must have equal length")

    @classmethod
    def from_draws(cls, draws) -> "UserBatch":
        draws = list(draws)
        if not draws:
            return cls.empty()
        g, o, d, v, lam = zip(*draws)
        return cls(np.array(g, np.int64), np.array(o, np.int64), np.array(d, np.int64),
                   np.array(v, float), np.array(lam, float))

    @classmethod
    def from_arrays(cls, origin, destination, vot, outside, group=None) -> "UserBatch":
        origin = np.atleast_1d(np.asarray(origin, np.int64))
        n = len(origin)
        group = np.zeros(n, np.int64) if group is None else np.asarray(group, np.int64)
        return cls(group, origin, np.broadcast_to(np.asarray(destination, np.int64), (n,)).copy(),
                   np.broadcast_to(np.asarray(vot, float), (n,)).copy(),
                   np.broadcast_to(np.asarray(outside, float), (n,)).copy())

    @classmethod
    def empty(cls) -> "UserBatch":
        z = np.zeros(0, np.int64)
        return cls(z, z, z, np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return len(self.group)

    def __getitem__(self, u) -> UserDraw:
        return UserDraw(int(self.group[u]), int(self.origin[u]), int(self.destination[u]),
                        float(self.vot[u]), float(self.outside[u]))

    def __iter__(self) -> Iterator[UserDraw]:
        return (self[u] for u in range(len(self)))

    def subset(self, mask) -> "UserBatch":
        return UserBatch(self.group[mask], self.origin[mask], self.destination[mask],
                         self.vot[mask], self.outside[mask])

    def types(self) -> UserTypes:
        n = len(self)
        if n == 0:
            z = np.zeros(0, np.int64)
            return UserTypes(z, z, np.zeros(0), np.zeros(0), z, z)
        # +0.0 folds -0.0 into 0.0 before comparing bit patterns
        vbits = (self.vot + 0.0).view(np.int64)
        lbits = (self.outside + 0.0).view(np.int64)
        inv, first = factorize_rows(self.origin, self.destination, vbits, lbits)
        cnt = np.bincount(inv, minlength=len(first)).astype(np.int64)
        return UserTypes(self.origin[first], self.destination[first], self.vot[first],
                         self.outside[first], cnt, inv)


@dataclass(frozen=True, eq=False)
class PopulationModel:
    """Groups plus the generator behind their per-period draws.

    Parameters
    ----------
    groups : tuple of UserGroup
    seed : int
    od_universe : (k, 2) int array
        Candidate O-D pairs for resampled trips.  Defaults to the groups'
        distinct default pairs.
    vot_draw : {"group", "user"}
        Whether all users of a group share one VoT draw per period, or each
        user draws independently.
    """

    groups: tuple
    seed: int = 0
    od_universe: np.ndarray | None = None
    vot_draw: str = "group"
    _cols: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise ValueError("a population needs at least one group")
        if self.vot_draw not in ("group", "user"):
            raise ValueError("vot_draw must be 'group' or 'user'")
        object.__setattr__(self, "groups", groups)
        if self.od_universe is None:
            universe = np.array(sorted({g.od for g in groups}), dtype=np.int64)
        else:
            universe = np.asarray(self.od_universe, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "od_universe", universe)
        demand = np.array([g.demand for g in groups], np.int64)
        owner = np.repeat(np.arange(len(groups)), demand)
        cols = dict(
            demand=demand,
            owner=owner,
            group_id=np.array([g.id for g in groups], np.int64),
            origin=np.array([g.origin for g in groups], np.int64),
            dest=np.array([g.destination for g in groups], np.int64),
            mu=np.array([g.mean_vot for g in groups], float),
            spread=np.array([g.vot_spread for g in groups], float),
            resample=np.array([g.od_resample_prob for g in groups], float),
            outside=np.array([g.outside_cost for g in groups], float),
        )
        object.__setattr__(self, "_cols", cols)

    @property
    def user_count(self) -> int:
        return int(self._cols["demand"].sum())

    @property
    def calibrated(self) -> bool:
        return bool(np.all(np.isfinite(self._cols["outside"])))

    def replace_groups(self, **columns) -> "PopulationModel":
        """Copy with per-group fields replaced, e.g. ``mean_vot=array``."""
        groups = []
        for i, g in enumerate(self.groups):
            groups.append(dataclasses.replace(g, **{k: float(v[i]) for k, v in columns.items()}))
        return dataclasses.replace(self, groups=tuple(groups))

    def sample_period(self, t: int) -> UserBatch:
        c = self._cols
        rng = period_rng(self.seed, t)
        owner = c["owner"]
        n = len(owner)
        lo = c["mu"] * (1 - c["spread"])
        hi = c["mu"] * (1 + c["spread"])
        if self.vot_draw == "group":
            vot = rng.uniform(lo, hi)[owner]
        else:
            vot = rng.uniform(lo[owner], hi[owner])
        origin = c["origin"][owner]
        dest = c["dest"][owner]
        p = c["resample"][owner]
        if np.any(p > 0):
            flip = rng.random(n) < p
            k = int(flip.sum())
            pick = rng.integers(0, len(self.od_universe), size=k)
            origin = origin.copy()
            dest = dest.copy()
            origin[flip] = self.od_universe[pick, 0]
            dest[flip] = self.od_universe[pick, 1]
        return UserBatch(c["group_id"][owner], origin, dest, vot, c["outside"][owner])

    def mean_instance(self, vot=None) -> UserBatch:
        """The deterministic instance with every user at the default O-D and a fixed VoT.

        `vot` defaults to each group's mean; pass a scalar for a population-wide value.
        """
        c = self._cols
        owner = c["owner"]
        v = c["mu"][owner] if vot is None else np.full(len(owner), float(vot))
        return UserBatch(c["group_id"][owner], c["origin"][owner], c["dest"][owner], v, c["outside"][owner])

    def population_mean_vot(self) -> float:
        """Demand-weighted mean of the group mean VoTs."""
        c = self._cols
        return float(np.average(c["mu"], weights=c["demand"]))


def sample_period(model, t: int) -> UserBatch:
    """Draw period t's users; reproducible from ``(model.seed, t)``."""
    return model.sample_period(t)


def sample_mean_vots(model: PopulationModel, low: float = 5.0, high: float = 100.0) -> PopulationModel:
    """Copy of `model` with every group's mean VoT drawn Uniform[low, high]."""
    rng = period_rng(model.seed, 0, _STREAM_MEAN_VOT)
    mu = rng.uniform(low, high, size=len(model.groups))
    return model.replace_groups(mean_vot=mu)


def calibrate_outside_option(model: PopulationModel, net: Network, optimal_tolls, factor: float = 1.5) -> PopulationModel:
    """Set each group's outside cost to `factor` times its cheapest tolled trip at mean VoT."""
    if factor < 0:
        raise ValueError("factor must be nonnegative")
    c = model._cols
    batch = cheapest_paths(net, c["origin"], c["dest"], c["mu"], optimal_tolls)
    bad = ~np.isfinite(batch.cost)
    if np.any(bad):
        g = model.groups[int(np.argmax(bad))]
        raise ValueError(f"group {g.id}: destination {g.destination} unreachable from {g.origin}")
    return model.replace_groups(outside_cost=factor * batch.cost)


class TwoTypePopulation:
    """Every period, all users share one type drawn at random.

    Used for the one-edge lower-bound instance: with probability `p_first`
    all users get ``types[0]``, else ``types[1]``; each type is a
    ``(vot, outside_cost)`` pair.
    """

    def __init__(self, users: int, origin: int, destination: int, types, p_first: float = 0.5, seed: int = 0):
        if users < 1:
            raise ValueError("users must be at least 1")
        self.users = int(users)
        self.origin = origin
        self.destination = destination
        self.types = [tuple(map(float, ty)) for ty in types]
        self.p_first = p_first
        self.seed = seed

    @property
    def user_count(self) -> int:
        return self.users

    def period_type(self, t: int) -> int:
        return 0 if period_rng(self.seed, t).random() < self.p_first else 1

    def sample_period(self, t: int) -> UserBatch:
        v, lam = self.types[self.period_type(t)]
        return UserBatch.from_arrays(np.full(self.users, self.origin), self.destination, v, lam)
