import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tollsim.equilibrium import OUTSIDE, compute_equilibrium
from tollsim.lp_oracle import LpInstance, brute_force_optimum, solve_lp
from tollsim.network import Network
from tollsim.population import UserBatch
from tollsim.scenarios import random_parallel_instance, random_small_instance
from tollsim.vcg import (ParallelInstance, check_vcg_equilibrium, counterexample_network, counterexample_tolls,
                         vcg_payment_general, vcg_payments_parallel, vcg_tolls_parallel)


def externality_by_resolve(inst, u):
    """Others' optimal cost without u minus their cost in the full optimum, via greedy re-solves."""
    edge = inst.assignment()
    others = np.delete(inst.vot, u)
    with_u = sum(inst.vot[w] * inst.latency[edge[w]] for w in range(len(inst.vot)) if w != u)
    sub = ParallelInstance(inst.latency, inst.capacity, others)
    without = float(others @ inst.latency[sub.assignment()]) if len(others) else 0.0
    return with_u - without


class TestParallel:
    def test_two_edges(self):
        inst = ParallelInstance([1.0, 2.0], [1, 1], [10.0, 1.0])
        assert vcg_payments_parallel(inst) == pytest.approx([1.0, 0.0])
        assert [externality_by_resolve(inst, u) for u in range(2)] == pytest.approx([1.0, 0.0])

    def test_single_edge_free(self):
        inst = ParallelInstance([1.0], [5], [3.0, 2.0, 1.0])
        assert np.all(vcg_payments_parallel(inst) == 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            ParallelInstance([2.0, 1.0], [1, 1], [1.0])
        with pytest.raises(ValueError):
            ParallelInstance([1.0], [1], [2.0, 1.0])
        with pytest.raises(ValueError):
            ParallelInstance([1.0], [1], [1.0, 2.0])

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31))
    def test_payments_are_externalities(self, seed):
        inst = random_parallel_instance(np.random.default_rng(seed))
        pay = vcg_payments_parallel(inst)
        edge = inst.assignment()
        for u in range(len(inst.vot)):
            assert pay[u] == pytest.approx(externality_by_resolve(inst, u), abs=1e-9)
        for e in set(edge):
            assert len(set(np.round(pay[edge == e], 9))) == 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_general_formula_agrees(self, seed):
        inst = random_parallel_instance(np.random.default_rng(seed), max_users=4)
        net, users = inst.network(), inst.users()
        opt = brute_force_optimum(net, users)
        general = [vcg_payment_general(net, users, u, opt) for u in range(len(users))]
        assert general == pytest.approx(list(vcg_payments_parallel(inst)), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_tolls_support_optimum(self, seed):
        inst = random_parallel_instance(np.random.default_rng(seed))
        tolls = vcg_tolls_parallel(inst)
        edge = inst.assignment()
        # nobody prefers another edge under the tolls
        for u, e in enumerate(edge):
            mine = inst.vot[u] * inst.latency[e] + tolls[e]
            assert np.all(mine <= inst.vot[u] * inst.latency + tolls + 1e-9)
        net, users = inst.network(), inst.users()
        assignment = [net.path([int(e)]) for e in edge]
        assert check_vcg_equilibrium(net, users, tolls, assignment).is_equilibrium

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_lp_and_vcg_tolls_same_assignment(self, seed):
        inst = random_parallel_instance(np.random.default_rng(seed))
        net, users = inst.network(), inst.users()
        sol = solve_lp(LpInstance(net, users))
        hint = sol.user_assignment()
        if hint is None:
            return
        a = compute_equilibrium(net, users, sol.tolls, prefer=hint)
        b = compute_equilibrium(net, users, vcg_tolls_parallel(inst),
                                prefer=[net.path([int(e)]) for e in inst.assignment()])
        assert np.array_equal(a.flows, b.flows)


class TestGeneral:
    def test_removal_changes_nothing(self):
        net = Network.from_edges(2, [(0, 1, 1.0, 10.0)])
        users = UserBatch.from_arrays([0, 0], 1, [2.0, 3.0], np.inf)
        assert vcg_payment_general(net, users, 0) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_nonnegative(self, seed):
        net, users = random_small_instance(np.random.default_rng(seed), max_users=3)
        opt = brute_force_optimum(net, users)
        for u in range(len(users)):
            assert vcg_payment_general(net, users, u, opt) >= -1e-9


class TestCounterexample:
    def users(self, v_high=10.0, v_low=1.0):
        return UserBatch.from_arrays([0, 0], 5, [v_high, v_low], np.inf)

    def test_payments_match_closed_form(self):
        net = counterexample_network()
        users = self.users()
        lp1, lp2, lp3 = 1.0, 2.0, 3.0
        opt = brute_force_optimum(net, users)
        # P1 shares a capacity-1 edge with both others: high VoT on P2, low VoT on P3
        assert [p.edges for p in opt.assignment] == [(3, 4, 2), (0, 5, 6)]
        pay, tolls = counterexample_tolls(net, users)
        # without the high user the low one moves P3 -> P1, and vice versa P2 -> P1
        assert pay == pytest.approx([1.0 * (lp3 - lp1), 10.0 * (lp2 - lp1)])
        assert tolls[2] == pytest.approx(pay[0]) and tolls[0] == pytest.approx(pay[1])

    def test_edge_split_not_equilibrium(self):
        net = counterexample_network()
        users = self.users()
        pay, tolls = counterexample_tolls(net, users)
        check = check_vcg_equilibrium(net, users, tolls)
        assert not check.is_equilibrium
        assert check.user == 1
        assert check.current.edges == (0, 5, 6) and check.deviation.edges == (3, 4, 2)
        current = 1.0 * 3 + tolls[[0, 5, 6]].sum()
        deviation = 1.0 * 2 + tolls[[3, 4, 2]].sum()
        assert (current, deviation) == pytest.approx((13.0, 4.0))
        assert check.gain == pytest.approx(current - deviation) and check.gain > 0

    def test_any_low_vot_breaks_it(self):
        net = counterexample_network()
        for v_low in (0.5, 2.0, 5.0):
            users = self.users(10.0, v_low)
            _, tolls = counterexample_tolls(net, users)
            assert not check_vcg_equilibrium(net, users, tolls).is_equilibrium

    def test_zero_tolls_uncapacitated(self):
        net = Network.from_edges(3, [(0, 1, 1.0, 99.0), (1, 2, 1.0, 99.0), (0, 2, 3.0, 99.0)])
        users = UserBatch.from_arrays([0, 0], 2, [1.0, 2.0], np.inf)
        assert check_vcg_equilibrium(net, users, np.zeros(3)).is_equilibrium
        tight = net.with_capacity(np.array([1.0, 1.0, 99.0]))
        check = check_vcg_equilibrium(tight, users, np.zeros(3))
        assert not check.is_equilibrium and check.deviation is not OUTSIDE
