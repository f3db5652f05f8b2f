"""
Choosing gamma so attraction and repulsion balance
==================================================

When every sample in the batch collapses onto its anchor, the positive
term contributes exp(1 / (gamma tau)) and the B - 1 cross terms contribute
(B - 1) exp(1 / tau).  Equating them gives gamma = 1 / (tau ln(B - 1) + 1).
"""

import numpy as np

from cnoise import cno_loss, desirable_gamma

tau = 0.1
print(" B      gamma")
for b in (2, 5, 13, 73, 775):
    print(f"{b:4d}   {desirable_gamma(tau, b):.4f}")

# Check the balance numerically for B = 5: at the balancing gamma the
# positive weight equals the summed negative weight.
b = 5
g = desirable_gamma(tau, b)
print("\npositive:", np.exp(1 / (g * tau)), " negatives:", (b - 1) * np.exp(1 / tau))

# and for a collapsed batch the loss sits at log B - 1/(gamma tau) + 1/tau
u = np.tile([1.0, 0.0], (b, 1))
print("collapsed-batch loss:", cno_loss(u, u, tau, g)[0], " closed form:", np.log(b) - 1 / (g * tau) + 1 / tau)
