"""
Off-policy evaluation on a noisy gridworld
==========================================

Six ways to build the learning target, trained on the same uniform-random
dataset to evaluate a mostly-greedy policy. Lambda-returns read along the
logged trajectories follow the behaviour policy, so they converge to the
wrong values; targets sampled from a model of the evaluation policy do not.

Uses the released tabular config with two seeds (about a minute).
"""

import dataclasses
from pathlib import Path

import numpy as np

from uhm_lab.config import load_config
from uhm_lab.harness import run_suite, tabular_problem
from uhm_lab.horizons import winsorized_kmax
from uhm_lab.learning import off_policy_lambda_fixed_point
from uhm_lab.mdp import exact_q

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "tabular.conf")
cfg = dataclasses.replace(cfg, seeds=(0, 1))

rows = run_suite(cfg).rows
print(f"{'method':12s} " + " ".join(f"{s:>8d}" for s in (0, 50_000, 100_000, 200_000)))
for method in cfg.methods:
    curve = {}
    for r in rows:
        if r.method == method:
            curve.setdefault(r.step, []).append(r.value)
    print(f"{method:12s} " + " ".join(f"{np.mean(curve[s]):8.4f}" for s in (0, 50_000, 100_000, 200_000)))

# Where DTD(lambda) ends up: the fixed point of lambda-returns taken along
# behaviour trajectories, solvable in closed form.
t = cfg.tabular
mdp, policy, behavior, _ = tabular_problem(cfg, 0)
oracle = off_policy_lambda_fixed_point(mdp, behavior, policy, t.lambda_f, winsorized_kmax(t.lambda_f, t.gamma, t.q))
print(f"bias of the behaviour lambda-return fixed point: {np.abs(oracle - exact_q(mdp, policy)).max():.4f}")
