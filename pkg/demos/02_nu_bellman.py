"""
The horizon-mixture Bellman operator on a small MDP
====================================================

Every horizon measure gives a gamma-contraction whose fixed point is Q^pi.
The n-step and lambda-return backups are two particular measures, and
one-sample targets drawn from n-step future-state tables are unbiased.
"""

import numpy as np

from uhm_lab.horizons import (
    HorizonDistribution,
    HorizonMeasure,
    geometric_measure,
    nstep_measure,
    winsorized_geometric_measure,
    winsorized_kmax,
)
from uhm_lab.mdp import exact_q, random_mdp, random_policy
from uhm_lab.measures import nstep_measures_direct
from uhm_lab.rng import make_rng
from uhm_lab.values import (
    apply_nu_bellman,
    gamma_mve_operator,
    nstep_operator,
    nu_fixed_point,
    sample_target_gnu,
    sup_error,
    td_lambda_operator,
)

rng = make_rng("demo", "nu-bellman")
mdp = random_mdp(6, 2, rng, discount=0.9)
pi = random_policy(6, 2, rng)
q = rng.normal(size=(6, 2))
q_pi = exact_q(mdp, pi)

# An arbitrary sub-probability measure: weights on horizons 1, 3 and 4.
nu = HorizonMeasure(0.9, [0.3, 0.0, 0.2, 0.1])
q_fix, iters = nu_fixed_point(mdp, pi, nu, np.zeros((6, 2)), tol=1e-12)
print(f"fixed point after {iters} sweeps, distance to Q^pi {sup_error(q_fix, q_pi):.1e}")

# Special cases: a point mass at n gives n-step TD, a geometric measure TD(lambda).
print("n-step  gap", sup_error(apply_nu_bellman(mdp, pi, q, nstep_measure(3, 0.9)), nstep_operator(mdp, pi, q, 3)))
print("TD(lam) gap", sup_error(apply_nu_bellman(mdp, pi, q, geometric_measure(0.7, 0.9)), td_lambda_operator(mdp, pi, q, 0.7)))

# Value expansion through the lam*gamma successor measure is the same backup.
print("MVE     gap", sup_error(gamma_mve_operator(mdp, pi, q, 0.7), td_lambda_operator(mdp, pi, q, 0.7)))

# One-sample targets: draw n, then a future state from the n-step table.
k_max = winsorized_kmax(0.8, 0.9, 0.2)
nu_w = winsorized_geometric_measure(0.8, 0.9, k_max)
p_h = HorizonDistribution.winsorized_geometric(0.72, k_max)
table = nstep_measures_direct(mdp, pi, k_max)
draws = [sample_target_gnu(0, 1, mdp.reward[0, 1], table, q, mdp.reward, nu_w, p_h, rng) for _ in range(20_000)]
exact = apply_nu_bellman(mdp, pi, q, nu_w)[0, 1]
print(f"sampled target mean {np.mean(draws):.4f} +- {np.std(draws) / np.sqrt(len(draws)):.4f}, exact {exact:.4f}")
