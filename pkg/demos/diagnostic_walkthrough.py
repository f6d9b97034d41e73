"""Watching the inner-product diagnostic decide when SGDM has stopped making progress.

Run with ``python3 demos/diagnostic_walkthrough.py``. Takes a few seconds.
"""
# %%
import numpy as np

from sgdm_diag import harness
from sgdm_diag.core import RngStream
from sgdm_diag.diagnostic import run_with_diagnostic
from sgdm_diag.problems import empirical_optimum

# Q-Low: least squares in 20 dimensions, 1000 examples, momentum 0.2 with no switch.
setting = harness.SETTINGS["Q-Low"]
rng = RngStream(0)
model = setting.problem.build(rng.child(0))
print(setting.name, setting.hp)

# %%
# The statistic S accumulates <g_n, g_{n-1}> once a burn-in has passed. Far from
# the optimum successive gradients agree; once noise dominates they start to
# cancel. The first check period with S < 0 ends the run.
theta, rec = run_with_diagnostic(model, setting.hp, setting.diag, rng.child(1))
n = rec.diagnostic_activation_at
print(f"diagnostic fired at iteration {n} of {setting.hp.epochs * model.N // setting.hp.batch_size}")

ip = np.nan_to_num(np.asarray(rec.inner_product))
for start in range(0, len(ip), 50):
    print(f"  iterations {start + 1:4d}-{start + 50:4d}: mean <g_n, g_n-1> = {ip[start:start + 50].mean(): .4f}")
print(f"final S = {rec.statistic_S[-1]:.4f}")

# %%
# Was that stop any good? Compare against the least-squares minimizer.
out = harness.classify_run(rec, empirical_optimum(model), setting.criteria)
print(f"label={out.label}  |theta_n - theta*|^2={out.dist_sq:.3g}  K={out.K:.2f}")

# %%
# Repeat across seeds; the reference targets are what the method is expected to reach.
rep = harness.error_rate_experiment("Q-Low", runs=20, seed=1)
print(rep.summary())
