"""Regret, capacity violation, travel-time ratios and log-log slope fits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RunTrace:
    """Per-period series of one run.

    `oracle_cost` holds U_t* where the oracle was solved and NaN elsewhere;
    `certified_gap` is ``tolls . (c - x)`` per period, an upper bound on
    ``U_t - U_t*`` that needs no oracle.
    """

    capacity: np.ndarray
    system_cost: np.ndarray
    oracle_cost: np.ndarray
    flows: np.ndarray
    tolls: np.ndarray
    travel_time: np.ndarray
    revenue: np.ndarray | None = None
    outside: np.ndarray | None = None
    certified_gap: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.capacity = np.asarray(self.capacity, float)
        self.system_cost = np.asarray(self.system_cost, float)
        self.oracle_cost = np.asarray(self.oracle_cost, float)
        self.flows = np.asarray(self.flows, float)
        self.tolls = np.asarray(self.tolls, float)
        self.travel_time = np.asarray(self.travel_time, float)
        T = len(self.system_cost)
        for name in ("oracle_cost", "travel_time"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} must have length {T}")
        for name in ("flows", "tolls"):
            if getattr(self, name).shape != (T, len(self.capacity)):
                raise ValueError(f"{name} must have shape (T, |E|)")
        if self.certified_gap is None:
            self.certified_gap = np.einsum("te,te->t", self.tolls, self.capacity - self.flows)

    @property
    def horizon(self) -> int:
        return len(self.system_cost)

    @property
    def oracle_mask(self) -> np.ndarray:
        return np.isfinite(self.oracle_cost)


def regret(trace: RunTrace) -> float:
    """Cumulative achieved minus oracle cost.

    With a subsampled oracle the oracle sum is estimated as T times the mean
    over solved periods.
    """
    mask = trace.oracle_mask
    if mask.all():
        return float(np.sum(trace.system_cost - trace.oracle_cost))
    if not mask.any():
        raise ValueError("no oracle values in trace")
    return float(trace.system_cost.sum() - trace.horizon * trace.oracle_cost[mask].mean())


def certified_regret(trace: RunTrace) -> float:
    """Upper bound on the regret from the tolls and flows alone."""
    return float(np.sum(trace.certified_gap))


@dataclass(frozen=True)
class Violation:
    vector: np.ndarray
    l2: float
    linf: float
    argmax: int


def violation(trace: RunTrace) -> Violation:
    """Positive part of the cumulative excess flow over capacity, per edge."""
    excess = np.sum(trace.flows - trace.capacity, axis=0)
    v = np.maximum(excess, 0.0)
    return Violation(v, float(np.linalg.norm(v)), float(v.max(initial=0.0)), int(np.argmax(v)) if v.size else -1)


@dataclass(frozen=True)
class MetricReport:
    regret: float
    certified_regret: float
    violation: np.ndarray
    violation_l2: float
    violation_linf: float
    normalized_regret: float
    normalized_violation: float
    normalized_travel_time: float


def normalized_metrics(trace: RunTrace, min_travel_time: float | None = None) -> MetricReport:
    """Ratios against the oracle cost, the cumulative capacity and the minimum travel time.

    Normalised violation is the L-infinity violation over T times the
    capacity of the edge attaining it (zero for violation-free runs).
    `min_travel_time` is the per-period capacity-feasible minimum; when omitted
    the travel-time ratio is NaN.
    """
    T = trace.horizon
    r = regret(trace)
    oracle_total = T * float(np.mean(trace.oracle_cost[trace.oracle_mask]))
    if oracle_total <= 0:
        raise ValueError("oracle total cost must be positive")
    v = violation(trace)
    if v.linf > 0:
        nv = v.linf / (T * trace.capacity[v.argmax])
    else:
        nv = 0.0
    if min_travel_time is None:
        ntt = float("nan")
    elif min_travel_time <= 0:
        raise ValueError("minimum travel time must be positive")
    else:
        ntt = float(np.mean(trace.travel_time)) / min_travel_time
    return MetricReport(r, certified_regret(trace), v.vector, v.l2, v.linf, r / oracle_total, nv, ntt)


def loglog_slope(points) -> tuple[float, float]:
    """Least-squares slope of log(value) on log(T) and the RMSE of the residuals."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 (T, value) points")
    if np.any(pts <= 0):
        raise ValueError("T and values must be positive")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return float(slope), float(np.sqrt(np.mean(resid ** 2)))


def regret_bound(edge_count: int, user_count: int, max_capacity: float, T: int) -> float:
    """Upper bound on regret for step 1/sqrt(T)."""
    return edge_count * (user_count + max_capacity) ** 2 / 2 * np.sqrt(T)


def violation_bound(edge_count: int, user_count: int, max_capacity: float, max_outside: float, T: int) -> float:
    """Upper bound on the L2 violation for step 1/sqrt(T)."""
    return edge_count * (max_outside + max_capacity + user_count) * np.sqrt(T)
