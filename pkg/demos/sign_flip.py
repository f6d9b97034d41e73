"""Why high momentum hides stationarity from the plain diagnostic.

With beta = 0.2 the inner product of successive stochastic gradients is negative
on average once the iterates bounce around the optimum. With beta = 0.8 the
velocity keeps successive steps aligned and the average turns positive, so
S never drops below zero. The three-step closed form from the optimum gives the
opposite picture over a short horizon: it stays negative for every beta in
[0, 1), and its root lies above 1. The flip is a long-run effect of velocity
building up, not something three steps can show.
"""
# %%
import numpy as np

from sgdm_diag import harness
from sgdm_diag import theory as th
from sgdm_diag.core import RngStream

means = harness.sign_flip_experiment(runs=10, seed=0, betas=(0.2, 0.5, 0.8))
for beta, vals in means.items():
    print(f"beta={beta}: mean stationary <g_n, g_n-1> = {np.nanmean(vals): .5f}")

# %%
# Started exactly at the optimum, three steps of SGDM with isotropic noise:
for beta in (0.0, 0.2, 0.5, 0.8):
    exact = th.expected_ip3_from_optimum(20, 0.01, beta, 1.0)
    mc, se = th.mc_ip3_from_optimum(20, 0.01, beta, 1.0, 200_000, RngStream(beta))
    print(f"beta={beta}: closed form {exact: .5f}   simulated {mc: .5f} +- {se:.5f}")
print("root of the closed form in beta:", th.ip3_sign_root(20, 0.01))

# %%
# The power of the test: stationary variance dwarfs the squared mean.
model, ref, recs = harness.paired_stationary_runs(0, 0, betas=(0.2,), keep_iterates=True)
rec = recs[0.2]
window = (harness.phase_boundary(rec), len(rec))
k = th.estimate_constants(model, rec, window, ref)
rep = th.check_variance_ratio(rec, k, k.gamma, window)
print(f"Var/E^2 = {rep['empirical']:.1f}, lower bound at this gamma = {rep['bound']:.3g}")
print("gamma that guarantees ratio >= 3:", rep["gamma_for_lambda"])
