"""Forecast presence and counts, then list likely directions of spread.

Fits a simulated panel, simulates four periods ahead holding the last
covariates fixed, and reports neighbor pairs where the posterior odds ratio
of presence exceeds 1.2 with probability at least 0.75.
"""
import numpy as np

from zscmsnb import FitConfig, run_chains
from zscmsnb import prediction as P
from zscmsnb.simulation import GeneratorSpec, generate_dataset

panel, _, model, _ = generate_dataset(GeneratorSpec(n_rows=3, n_cols=4, n_times=48), np.random.default_rng(3))
store = run_chains(model, FitConfig(n_iterations=5000, burn_in=2000, n_chains=2, seed=7))

K = 4
fc = P.simulate_forecast(store, P.ForecastScenario.hold_last(model, K), K, np.random.default_rng(0))
pres, _, _ = fc.summary("presence")
mean, q025, q975 = fc.summary("counts")
for i, area in enumerate(panel.area_ids):
    last = panel.y[i, -4:].tolist()
    ahead = ", ".join(f"{mean[k, i]:.1f} [{q025[k, i]:.0f}-{q975[k, i]:.0f}]" for k in range(K))
    print(f"area {area}: last {last}  P(present next) {pres[0, i]:.2f}  counts ahead {ahead}")

print("\nlikely spread (into <- from, posterior probability):")
for into, src, p in P.arrow_table(store, threshold=1.2, prob=0.75):
    print(f"  {into} <- {src}  {p:.2f}")
