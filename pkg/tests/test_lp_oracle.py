import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tollsim.equilibrium import compute_equilibrium
from tollsim.lp_oracle import (LpInfeasible, LpInstance, LpStatus, brute_force_optimum, check_market_clearing,
                               dual_objective, solve_lp, subgradient_solve)
from tollsim.network import Network, shortest_path
from tollsim.population import UserBatch
from tollsim.scenarios import lower_bound_network, random_small_instance


def type_one_users():
    return UserBatch.from_arrays([0, 0], 1, 1.0, 2.0)


def parallel3():
    return Network.from_edges(2, [(0, 1, 1.0, 2.0), (0, 1, 2.0, 2.0), (0, 1, 4.0, 3.0)])


class TestSolveLp:
    def test_lower_bound_period(self):
        sol = solve_lp(LpInstance(lower_bound_network(), type_one_users()))
        assert sol.status is LpStatus.OPTIMAL
        assert sol.objective == pytest.approx(3.0)
        assert sol.edge_flows == pytest.approx([1.0])
        assert sol.outside_flows.sum() == pytest.approx(1.0)
        assert sol.objective == pytest.approx(brute_force_optimum(lower_bound_network(), type_one_users()).cost)

    def test_uncapacitated(self):
        net = Network.from_edges(3, [(0, 1, 1.0, 1e6), (1, 2, 1.0, 1e6), (0, 2, 3.0, 1e6)])
        users = UserBatch.from_arrays([0, 0, 1], [2, 2, 2], [1.0, 2.0, 3.0], 100.0)
        sol = solve_lp(LpInstance(net, users))
        assert np.all(sol.tolls == 0)
        expect = sum(u.vot * shortest_path(net, u.origin, u.destination)[1] for u in users)
        assert sol.objective == pytest.approx(expect)

    def test_zero_outside(self):
        sol = solve_lp(LpInstance(parallel3(), UserBatch.from_arrays([0] * 4, 1, 2.0, 0.0)))
        assert sol.objective == pytest.approx(0.0)
        assert sol.edge_flows == pytest.approx(np.zeros(3))

    def test_infeasible_without_outside(self):
        users = UserBatch.from_arrays([0] * 3, 1, 1.0, np.inf)
        with pytest.raises(LpInfeasible):
            solve_lp(LpInstance(lower_bound_network(), users))

    def test_no_outside_feasible(self):
        users = UserBatch.from_arrays([0] * 6, 1, [5.0, 4.0, 3.0, 2.0, 1.0, 1.0], np.inf)
        sol = solve_lp(LpInstance(parallel3(), users))
        # fastest two edges go to the four highest VoTs
        assert sol.objective == pytest.approx(5 + 4 + 2 * 3 + 2 * 2 + 4 * 1 + 4 * 1)
        assert check_market_clearing(sol).ok()

    def test_iteration_limit(self):
        net = Network.from_edges(3, [(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0), (0, 2, 1.5, 1.0), (0, 2, 5.0, 9.0)])
        users = UserBatch.from_arrays([0, 0, 0], 2, [3.0, 2.0, 1.0], 50.0)
        sol = solve_lp(LpInstance(net, users), max_iter=1)
        assert sol.status in (LpStatus.OPTIMAL, LpStatus.ITERATION_LIMIT)
        assert sol.iterations <= 1

    def test_report(self):
        text = solve_lp(LpInstance(lower_bound_network(), type_one_users())).report()
        assert "objective  3.000000" in text

    def test_bad_instance(self):
        with pytest.raises(ValueError):
            LpInstance(parallel3(), UserBatch.from_arrays([0], 1, -1.0, 1.0))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31))
    def test_random_properties(self, seed):
        rng = np.random.default_rng(seed)
        net, users = random_small_instance(rng)
        sol = solve_lp(LpInstance(net, users))
        assert sol.status is LpStatus.OPTIMAL
        # allocation rows and capacities
        per_type = np.zeros(len(sol.types))
        np.add.at(per_type, sol.col_type, sol.flow)
        assert per_type == pytest.approx(sol.types.count.astype(float), abs=1e-8)
        assert np.all(sol.edge_flows <= net.capacity + 1e-8)
        # strong duality, market clearing, LP below IP
        assert abs(sol.objective - sol.dual_value) <= 1e-6 * (1 + abs(sol.objective))
        assert check_market_clearing(sol).ok(1e-6)
        assert dual_objective(net, users, sol.tolls) == pytest.approx(sol.objective, abs=1e-6)
        ip = brute_force_optimum(net, users)
        assert sol.objective <= ip.cost + 1e-6

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31))
    def test_integral_solution_is_supported_by_tolls(self, seed):
        rng = np.random.default_rng(seed)
        net, users = random_small_instance(rng)
        sol = solve_lp(LpInstance(net, users))
        assignment = sol.user_assignment()
        if assignment is None:
            return
        rec = compute_equilibrium(net, users, sol.tolls, prefer=assignment)
        assert rec.system_cost == pytest.approx(sol.objective, abs=1e-6)
        assert np.all(rec.flows <= net.capacity + 1e-9)
        assert rec.system_cost == pytest.approx(brute_force_optimum(net, users).cost, abs=1e-6)


class TestDualObjective:
    def test_zero_tolls(self):
        net = parallel3()
        users = UserBatch.from_arrays([0, 0], 1, [1.0, 3.0], [0.5, 10.0])
        assert dual_objective(net, users, np.zeros(3)) == pytest.approx(0.5 + 3.0)

    def test_direct(self):
        users = UserBatch.from_arrays([0], 1, 1.0, 2.0)
        assert dual_objective(lower_bound_network(), users, np.array([0.5])) == pytest.approx(1.0)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31))
    def test_concave_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        net, users = random_small_instance(rng)
        t1, t2 = rng.random(net.edge_count) * 5, rng.random(net.edge_count) * 5
        d = lambda t: dual_objective(net, users, t)
        assert d((t1 + t2) / 2) >= (d(t1) + d(t2)) / 2 - 1e-9
        opt = solve_lp(LpInstance(net, users)).objective
        assert d(t1) <= opt + 1e-9 and d(t2) <= opt + 1e-9


class TestSubgradient:
    def test_parallel_matches_lp(self):
        users = UserBatch.from_arrays([0] * 6, 1, [5.0, 4.0, 3.0, 2.5, 2.0, 1.0], 9.0)
        inst = LpInstance(parallel3(), users)
        res = subgradient_solve(inst, iters=10_000)
        assert res.value >= dual_objective(inst.net, users, np.zeros(3))
        assert res.value == pytest.approx(solve_lp(inst).objective, abs=1e-3)

    def test_slack_edge_converges_to_zero(self):
        users = UserBatch.from_arrays([0], 1, 1.0, 5.0)
        net = Network.from_edges(2, [(0, 1, 1.0, 3.0)])
        res = subgradient_solve(LpInstance(net, users), iters=100)
        assert res.tolls == pytest.approx([0.0])

    def test_bad_args(self):
        inst = LpInstance(lower_bound_network(), type_one_users())
        with pytest.raises(ValueError):
            subgradient_solve(inst, iters=0)
        with pytest.raises(ValueError):
            subgradient_solve(inst, schedule="constant")


class TestMarketClearing:
    def test_uncapacitated_zero(self):
        net = Network.from_edges(2, [(0, 1, 1.0, 100.0)])
        rep = check_market_clearing(solve_lp(LpInstance(net, type_one_users())))
        assert rep.max_residual == 0.0

    def test_saturated_edge(self):
        sol = solve_lp(LpInstance(lower_bound_network(), type_one_users()))
        assert sol.tolls[0] > 0
        assert sol.edge_flows[0] == pytest.approx(1.0)
        assert check_market_clearing(sol).ok()
