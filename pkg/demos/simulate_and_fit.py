"""Simulate a small areal panel, fit it and compare the posterior with the truth.

A 4 x 5 lattice observed for 60 periods with about half the counts zero.
The fit is short (a couple of minutes on one core); raise ``n_iterations``
for anything you intend to report.

    python demos/simulate_and_fit.py
"""
import numpy as np

from zscmsnb import FitConfig, run_chains
from zscmsnb.diagnostics import diagnose
from zscmsnb.simulation import GeneratorSpec, generate_dataset, zero_fraction

rng = np.random.default_rng(42)
panel, truth_states, model, truth = generate_dataset(GeneratorSpec(), rng)
print(f"{panel.n_areas} areas, {panel.n_times} periods, {zero_fraction(panel):.0%} zeros")

store = run_chains(model, FitConfig(n_iterations=6000, burn_in=2000, n_chains=2, seed=1))
report = diagnose(store)

flat = store.flat_draws()
lo, hi = np.quantile(flat, [0.025, 0.975], axis=0)
print(f"\n{'parameter':10s} {'truth':>8s} {'mean':>8s} {'95% interval':>20s} {'ESS':>7s} {'Rhat':>6s}")
for k, name in enumerate(store.names):
    print(f"{name:10s} {truth.values[k]:8.3f} {flat[:, k].mean():8.3f} "
          f"[{lo[k]:8.3f}, {hi[k]:8.3f}] {report.ess[k]:7.0f} {report.rhat[k]:6.3f}")

# smoothed presence against the simulated states, over cells with a zero count
post = store.state_mean()
zero_cells = ~model.fixed_mask()
hit = np.mean((post[zero_cells] > 0.5) == (truth_states.s[zero_cells] == 1))
print(f"\nzero-count cells classified correctly by P(present) > 0.5: {hit:.0%}")
print(f"WAIC {report.waic.waic:.1f} (p_waic {report.waic.p_waic:.1f})")
