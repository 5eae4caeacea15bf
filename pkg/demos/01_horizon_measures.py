"""
Horizon measures, reward coefficients and importance weights
============================================================

A horizon measure nu puts weight nu(k) on bootstrapping after k steps. The
reward coefficients xi(k) follow from nu, and a horizon sampler p_H turns
the whole backup into a single draw weighted by (w_xi, w_nu).
"""

import numpy as np

from uhm_lab.horizons import (
    HorizonDistribution,
    importance_ratios,
    schedule_lambda,
    winsorized_geometric_measure,
    winsorized_kmax,
    xi_coefficients,
)

np.set_printoptions(precision=5, suppress=True)
lam, gamma, q = 0.8, 0.999, 0.2

# The cap k_max is the first horizon whose geometric tail mass (lam gamma)^k
# drops to q; everything past it is folded onto k_max.
k_max = winsorized_kmax(lam, gamma, q)
nu = winsorized_geometric_measure(lam, gamma, k_max)
print("k_max        ", k_max)
print("nu(k)        ", nu.weights(k_max))
print("total mass   ", nu.total_mass())

# xi(k) is the weight on the reward collected k steps ahead. For the capped
# geometric measure it is lam (lam gamma)^(k-1) and vanishes at k_max.
print("xi(k)        ", xi_coefficients(nu, k_max))

# Sampling n from the capped geometric law makes both weights constant
# below the cap: one draw per update, no trajectory needed.
p_h = HorizonDistribution.winsorized_geometric(lam * gamma, k_max)
w_xi, w_nu = importance_ratios(nu, None, p_h)
print("p_H(n)       ", p_h.probs)
print("w_xi(n)      ", w_xi)
print("w_nu(n)      ", w_nu)

# During training lambda grows with progress r so that the horizon
# 1 / (1 - lambda) rises linearly from 1 to 1 / (1 - lam).
for r in (0.0, 0.25, 0.5, 0.75, 1.0):
    lr = schedule_lambda(r, lam)
    print(f"r={r:4.2f}  lambda={lr:.4f}  1/(1-lambda)={1 / (1 - lr):.3f}  k_max={winsorized_kmax(lr, gamma, q)}")
