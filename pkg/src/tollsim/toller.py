"""Toll-setting policies.

`OnlineGradientToller` raises tolls on over-capacity edges and lowers them
on slack edges in proportion to the excess, projecting onto the nonnegative
orthant.  `ReactiveToller` moves each toll by a fixed increment in the
direction of the excess.  `StaticToller` posts fixed tolls plus small
per-period noise that breaks ties between equal-cost routes.
"""
from __future__ import annotations

import enum
import math

import numpy as np


class PolicyKind(enum.Enum):
    ONLINE_GRADIENT = "online"
    REACTIVE = "reactive"
    STATIC = "static"


def recommended_step(T: int) -> float:
    """Step size 1/sqrt(T) for a horizon of T periods."""
    if T < 1:
        raise ValueError("horizon must be at least 1")
    return 1.0 / math.sqrt(T)


def toll_bound(max_outside: float, max_capacity: float, user_count: int) -> float:
    """Upper bound on any toll produced by the gradient policy with step at most 1."""
    return float(max_outside) + float(max_capacity) + int(user_count)


def _check_dims(tolls, capacities, flows):
    capacities = np.asarray(capacities, dtype=float)
    flows = np.asarray(flows, dtype=float)
    if capacities.shape != tolls.shape or flows.shape != tolls.shape:
        raise ValueError(f"expected {tolls.shape[0]} capacities and flows, got "
                         f"{capacities.shape} and {flows.shape}")
    return capacities, flows


class TollerState:
    """Common bookkeeping: current tolls, period counter, optional trajectory log."""

    kind: PolicyKind

    def __init__(self, edge_count: int, record: bool = False, initial=None):
        self.tolls = np.zeros(edge_count) if initial is None else np.array(initial, dtype=float)
        if np.any(self.tolls < 0):
            raise ValueError("initial tolls must be nonnegative")
        self.period = 1
        self.record = record
        self.trajectory: list[np.ndarray] = [self.tolls.copy()] if record else []

    def current(self) -> np.ndarray:
        """Tolls to post for the current period."""
        return self.tolls

    def update(self, capacities, flows) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, tolls):
        self.tolls = tolls
        self.period += 1
        if self.record:
            self.trajectory.append(tolls.copy())
        return tolls


class OnlineGradientToller(TollerState):
    """Projected step ``tau <- max(0, tau - gamma * (c - x))``.

    Parameters
    ----------
    step : float
        gamma, in dollars per vehicle.
    project : bool
        Clip at zero.  Only switched off to check that tests catch its absence.
    """

    kind = PolicyKind.ONLINE_GRADIENT

    def __init__(self, edge_count: int, step: float, record: bool = False, project: bool = True, initial=None):
        if step <= 0:
            raise ValueError("step must be positive")
        super().__init__(edge_count, record, initial)
        self.step = float(step)
        self.project = project

    def update(self, capacities, flows) -> np.ndarray:
        return gradient_update(self, capacities, flows)


class ReactiveToller(TollerState):
    """Fixed-increment rule: +delta when over capacity, -delta (floored at 0) when under."""

    kind = PolicyKind.REACTIVE

    def __init__(self, edge_count: int, increment: float = 0.1, record: bool = False, initial=None):
        if increment <= 0:
            raise ValueError("increment must be positive")
        super().__init__(edge_count, record, initial)
        self.increment = float(increment)

    def update(self, capacities, flows) -> np.ndarray:
        return reactive_update(self, capacities, flows)


class StaticToller(TollerState):
    """Fixed base tolls with fresh Uniform[-h, h] noise each period, clipped at zero."""

    kind = PolicyKind.STATIC

    def __init__(self, base_tolls, noise_halfwidth: float = 5e-4, seed: int = 0, record: bool = False):
        base = np.asarray(getattr(base_tolls, "tolls", base_tolls), dtype=float)
        if np.any(base < 0):
            raise ValueError("base tolls must be nonnegative")
        if noise_halfwidth < 0:
            raise ValueError("noise half-width must be nonnegative")
        self.base = base.copy()
        self.noise_halfwidth = float(noise_halfwidth)
        self.rng = np.random.default_rng(seed)
        super().__init__(len(base), record, initial=static_tolls(base, self.noise_halfwidth, self.rng))

    def update(self, capacities, flows) -> np.ndarray:
        _check_dims(self.tolls, capacities, flows)
        return self._advance(static_tolls(self.base, self.noise_halfwidth, self.rng))


def gradient_update(state: OnlineGradientToller, capacities, flows) -> np.ndarray:
    """Advance `state` by one projected gradient step and return the new tolls."""
    if state.kind is not PolicyKind.ONLINE_GRADIENT:
        raise TypeError("gradient_update needs an online-gradient state")
    capacities, flows = _check_dims(state.tolls, capacities, flows)
    tau = state.tolls - state.step * (capacities - flows)
    if state.project:
        tau = np.maximum(tau, 0.0)
    return state._advance(tau)


def reactive_update(state: ReactiveToller, capacities, flows) -> np.ndarray:
    if state.kind is not PolicyKind.REACTIVE:
        raise TypeError("reactive_update needs a reactive state")
    capacities, flows = _check_dims(state.tolls, capacities, flows)
    tau = state.tolls.copy()
    over = flows > capacities
    under = flows < capacities
    tau[over] += state.increment
    tau[under] = np.maximum(tau[under] - state.increment, 0.0)
    return state._advance(tau)


def static_tolls(base_tolls, noise_halfwidth: float, rng) -> np.ndarray:
    """`base_tolls` plus i.i.d. Uniform[-h, h] noise per edge, clipped at zero.

    `base_tolls` may also be an LP solution, whose dual tolls are used.
    """
    base = np.asarray(getattr(base_tolls, "tolls", base_tolls), dtype=float)
    if noise_halfwidth == 0:
        return base.copy()
    noise = rng.uniform(-noise_halfwidth, noise_halfwidth, size=base.shape)
    return np.maximum(base + noise, 0.0)
