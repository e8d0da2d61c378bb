import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tollsim.scenarios import (ConfigError, LowerBoundPopulation, PeriodOracle, ScenarioConfig, TollBoundError,
                               build_lower_bound, build_sioux_falls, load_sioux_falls, lower_bound_gap, make_policy,
                               run_experiment, scaled_groups)
from tollsim.toller import OnlineGradientToller


@pytest.fixture(scope="module")
def small_sf():
    cfg = ScenarioConfig(demand_scale=0.1, capacity_scale=0.2, policies=["online", "reactive", "static_group",
                                                                          "static_population"])
    return cfg, build_sioux_falls(cfg, 0)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = ScenarioConfig(kind="lower_bound", horizon=7, seeds=[3, 4], step="auto", policies=["reactive"])
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ScenarioConfig.load(path) == cfg

    @pytest.mark.parametrize("bad", [
        dict(kind="grid"), dict(horizon=0), dict(demand_scale=0), dict(capacity_scale=-1.0),
        dict(policies=["greedy"]), dict(step=-1.0), dict(step="sqrt"), dict(oracle_every=-1),
        dict(kind="lower_bound", policies=["static_group"]), dict(horizon="x"), dict(colour="red"),
    ])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict(bad)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            ScenarioConfig.load(path)

    def test_step_for(self):
        assert ScenarioConfig(step="auto").step_for(400) == pytest.approx(0.05)
        assert ScenarioConfig(step=0.3).step_for(400) == 0.3


class TestSiouxFalls:
    def test_user_count_is_rounded_demand(self, small_sf):
        cfg, setup = small_sf
        _, demand = load_sioux_falls()
        expect = sum(int(math.floor(q * 0.1 + 0.5)) for q in demand.values())
        assert setup.population.user_count == expect
        assert setup.net.edge_count == 76

    def test_default_scale(self):
        _, demand = load_sioux_falls()
        groups = scaled_groups(demand, 0.5, 0.2, 0.0)
        assert sum(g.demand for g in groups) == sum(int(math.floor(q * 0.5 + 0.5)) for q in demand.values())

    def test_static_tolls_and_min_time(self, small_sf):
        _, setup = small_sf
        for name in ("static_group", "static_population"):
            assert setup.static_tolls[name].shape == (76,)
            assert np.all(setup.static_tolls[name] >= 0)
        assert setup.min_travel_time > 0

    def test_deterministic(self, small_sf):
        cfg, setup = small_sf
        again = build_sioux_falls(cfg, 0)
        for name in setup.static_tolls:
            assert np.array_equal(setup.static_tolls[name], again.static_tolls[name])
        a = run_experiment(cfg, setup, make_policy("online", cfg, setup, 5, 0), 5)
        b = run_experiment(cfg, again, make_policy("online", cfg, again, 5, 0), 5)
        assert np.array_equal(a.flows, b.flows) and np.array_equal(a.tolls, b.tolls)

    def test_single_period(self, small_sf):
        cfg, setup = small_sf
        tr = run_experiment(cfg, setup, make_policy("online", cfg, setup, 1, 0), 1, PeriodOracle(setup.net))
        assert tr.horizon == 1 and np.all(tr.tolls[0] == 0)
        assert np.isfinite(tr.oracle_cost[0])
        assert tr.meta["users"] == setup.population.user_count

    @pytest.mark.parametrize("name", ["reactive", "static_group", "static_population"])
    def test_other_policies_run(self, small_sf, name):
        cfg, setup = small_sf
        tr = run_experiment(cfg, setup, make_policy(name, cfg, setup, 3, 0), 3)
        assert tr.meta["policy"] in name and np.all(tr.tolls >= 0)


class TestLowerBound:
    def test_setup(self):
        setup = build_lower_bound(ScenarioConfig(kind="lower_bound"), 5)
        assert setup.net.edge_count == 1 and setup.net.capacity[0] == 1
        assert setup.population.user_count == 2

    def test_period_types_match_single_lookups(self):
        pop = LowerBoundPopulation(3)
        seq = pop.period_types(3000, start=1000)
        assert [pop.period_type(t) for t in range(1000, 4000, 97)] == list(seq[::97])

    def test_types_balanced(self):
        seq = LowerBoundPopulation(0).period_types(100_000)
        assert abs(seq.mean() - 0.5) < 0.01

    def test_run_costs(self):
        cfg = ScenarioConfig(kind="lower_bound", step=0.1)
        setup = build_lower_bound(cfg, 0)
        tr = run_experiment(cfg, setup, OnlineGradientToller(1, 0.1), 200, PeriodOracle(setup.net))
        kinds = setup.population.period_types(200)
        # type-I periods: LP optimum sends one user and pays 2 for the other
        assert np.all(tr.oracle_cost[kinds == 0] == 3.0)
        assert np.all(tr.oracle_cost[kinds == 1] == 0.0)

    def test_bound_error_on_unprojected_drift(self):
        cfg = ScenarioConfig(kind="lower_bound", step=0.3)
        setup = build_lower_bound(cfg, 0)
        policy = OnlineGradientToller(1, 0.3, project=False, initial=[0.05])
        with pytest.raises(TollBoundError):
            run_experiment(cfg, setup, policy, 100)


class TestGap:
    def test_direct_count(self):
        for s in range(5):
            kinds = LowerBoundPopulation(s).period_types(300)
            expect = 2.0 * max(2 * int(np.sum(kinds == 0)) - 300, 0)
            assert lower_bound_gap(300, [s])[0] == expect

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 2000), st.integers(0, 10_000))
    def test_range_and_parity(self, T, seed):
        g = lower_bound_gap(T, [seed])[0]
        assert 0 <= g <= 2.0 * T
        # a positive gap is twice 2n - T, which shares T's parity
        if g > 0:
            assert int(g / 2) % 2 == T % 2
