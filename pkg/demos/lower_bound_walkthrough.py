"""One edge of capacity 1, two users per period.

Type-I periods bring two users with VoT 1 and outside cost 2; type-II
periods bring two users who value nothing.  The gradient toller only sees
the edge flow, so it keeps overshooting in both directions.  The script
prints how the toll, the running violation and the regret evolve.
"""
import numpy as np

from tollsim.metrics import certified_regret, regret, violation
from tollsim.scenarios import PeriodOracle, ScenarioConfig, build_lower_bound, lower_bound_gap, run_experiment
from tollsim.toller import OnlineGradientToller

cfg = ScenarioConfig(kind="lower_bound", step="auto")

for T in (100, 1000, 10_000):
    setup = build_lower_bound(cfg, seed=0)
    policy = OnlineGradientToller(1, cfg.step_for(T), record=True)
    trace = run_experiment(cfg, setup, policy, T, PeriodOracle(setup.net))
    v = violation(trace)
    print(f"T={T:>6}  step={cfg.step_for(T):.4f}  final toll={trace.meta['final_tolls'][0]:.3f}  "
          f"max toll={trace.tolls.max():.3f}  violation={v.linf:.0f}  "
          f"regret={regret(trace):.1f}  certified={certified_regret(trace):.2f}")

# A clairvoyant planner facing the whole sequence pays 2 for every type-I
# user beyond the T that fit; its average excess grows like sqrt(T).
for T in (100, 1000, 10_000):
    gap = lower_bound_gap(T, range(500))
    print(f"T={T:>6}  mean excess cost over 500 seeds={gap.mean():.2f}  ratio to sqrt(T)={gap.mean() / np.sqrt(T):.3f}")
