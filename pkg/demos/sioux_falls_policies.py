"""Compare the four toll policies on a reduced Sioux Falls network.

Demand is 10% of the base trip table and capacities 20% of the TNTP values,
so one period takes a few milliseconds.  Prints normalized regret, violation
and travel time per policy, and the largest tolls the online policy posts.
"""
import numpy as np

from tollsim.metrics import normalized_metrics
from tollsim.scenarios import PeriodOracle, ScenarioConfig, build_sioux_falls, make_policy, run_experiment

T = 500
cfg = ScenarioConfig(demand_scale=0.1, capacity_scale=0.2, oracle_every=50,
                     policies=["online", "reactive", "static_population", "static_group"])
setup = build_sioux_falls(cfg, seed=0)
print(f"{setup.population.user_count} users, {setup.net.edge_count} edges, "
      f"population mean VoT {setup.meta['population_mean_vot']:.1f} $/h")

oracle = PeriodOracle(setup.net)
print(f"{'policy':>18}  {'regret':>8}  {'violation':>9}  {'travel time':>11}")
for name in cfg.policies:
    trace = run_experiment(cfg, setup, make_policy(name, cfg, setup, T, 0), T, oracle)
    m = normalized_metrics(trace, setup.min_travel_time)
    print(f"{name:>18}  {m.normalized_regret:>+8.4f}  {m.normalized_violation:>9.4f}  {m.normalized_travel_time:>11.3f}")
    if name == "online":
        final = trace.meta["final_tolls"]
        top = np.argsort(final)[::-1][:5]
        print("    highest final tolls:", ", ".join(f"edge {e}: ${final[e]:.2f}" for e in top))
