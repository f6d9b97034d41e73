"""Diagnostic-driven step decay vs the gamma0/n schedule on logistic regression.

The auto schedule runs the diagnostic at a fixed learning rate, divides it by
rho whenever the diagnostic fires, and drops momentum from 0.8 to 0.2 once the
per-epoch iterate distance falls below half its first value.
"""
# %%
import dataclasses

from sgdm_diag import harness
from sgdm_diag.core import HyperParams
from sgdm_diag.diagnostic import DiagnosticConfig

model, test = harness.logistic_task(0, n_train=4000, n_test=1000)
hp = HyperParams(gamma=1.0, beta=0.8, beta_final=0.2, batch_size=20, epochs=10)
diag = DiagnosticConfig(threshold_T=0.5)

# %%
gamma0s = [1.0, 0.1, 0.01]
auto = harness.robustness_sweep(model, gamma0s, "auto", 0, test, hp, rho=0.1, stage_epochs=3, diag=diag)
dec = harness.robustness_sweep(model, gamma0s, "decreasing", 0, test, hp, epochs=hp.epochs)
for a, d in zip(auto, dec):
    print(f"gamma0={a['gamma0']:<5}  auto {100 * a['accuracy']:.2f}%   gamma0/n {100 * d['accuracy']:.2f}%")

# %%
print(f"spread over gamma0: auto {100 * harness.spread(auto):.2f} points, "
      f"gamma0/n {100 * harness.spread(dec):.2f} points")
for s in auto[0]["stages"]:
    print("  stage", s)
