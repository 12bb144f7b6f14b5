"""Check the filters against brute-force enumeration on tiny panels.

Every state path of a 2- or 3-area panel over a few periods is enumerated,
which gives the exact likelihood and smoothed state probabilities.  The
forward filter, the block backward sampler and the single-site Gibbs
conditionals should agree to rounding error.
"""
import numpy as np

from zscmsnb import filtering as F, oracle

rng = np.random.default_rng(0)
for N, T in ((2, 3), (3, 4)):
    dev = oracle.cross_check(rng, n_instances=10, n_areas=N, n_times=T)
    print(f"N={N} T={T}: " + ", ".join(f"{k} {v:.1e}" for k, v in dev.items()))

# smoothed probabilities from a long Gibbs run at fixed parameters
inst = oracle.random_instance(rng, 2, 3)
m, v = inst.model, inst.v
sampler = F.StateSampler(m, "bffbs2")
inp = F.padded_inputs(m, v)
S = F.initialize_states(m, rng).s.copy()
acc = np.zeros(S.shape)
n = 20000
for _ in range(n):
    sampler.sweep(S, inp, rng)
    acc += S
print("\nexact P(S=1 | y):\n", np.round(oracle.exact_state_posterior(inst), 3))
print("block Gibbs estimate:\n", np.round(acc / n, 3))
