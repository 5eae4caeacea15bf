"""Invariant checks run by the verify suites.

Each check returns a :class:`CheckResult` holding the worst observed
deviation and the tolerance it must stay within. Checks draw everything
from the generator they are given, so a (root seed, seed) pair fixes
every number they report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .horizons import (
    HorizonDistribution,
    HorizonMeasure,
    geometric_measure,
    importance_ratios,
    nstep_measure,
    sample_horizon,
    schedule_lambda,
    winsorized_geometric_measure,
    winsorized_kmax,
    xi_coefficients,
)
from .mdp import exact_q, random_mdp, random_policy
from .measures import marginal_measure, nstep_measures_bootstrap, nstep_measures_direct, successor_measure
from .values import (
    apply_nu_bellman,
    expected_target_gnu,
    gamma_mve_operator,
    nstep_operator,
    nu_fixed_point,
    sample_target_gnu,
    sup_error,
    td_lambda_operator,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)


def random_measure(rng, gamma: float, max_support: int = 64) -> HorizonMeasure:
    """Sub-probability measure with random support length and total mass."""
    k = int(rng.integers(1, max_support + 1))
    w = rng.random(k) * (rng.random(k) < 0.7)
    total = w.sum()
    mass = rng.random()
    atoms = w * (mass / total) if total > 0 else w
    return HorizonMeasure(gamma, atoms)


def _problem(rng, max_states=10, max_actions=3, gamma=None):
    s = int(rng.integers(2, max_states + 1))
    a = int(rng.integers(1, max_actions + 1))
    mdp = random_mdp(s, a, rng, discount=gamma, sparsity=0.3 * rng.random())
    return mdp, random_policy(s, a, rng)


# Core ----------------------------------------------------------------------


def check_xi_identity(rng, count: int = 200) -> CheckResult:
    """gamma xi(k) + gamma sum_i gamma^(k-i) nu(i) = gamma^k."""
    worst = 0.0
    for i in range(count):
        gamma = (0.9, 0.99, 0.999)[i % 3]
        nu = random_measure(rng, gamma)
        K = len(nu.atoms) + 8
        xi = xi_coefficients(nu, K)
        w = nu.weights(K)
        k = np.arange(1, K + 1)
        # partial sums sum_{i<=k} gamma^(k-i) nu(i) via the running recursion
        conv = np.zeros(K)
        acc = 0.0
        for j in range(K):
            acc = gamma * acc + w[j]
            conv[j] = acc
        worst = max(worst, float(np.max(np.abs(gamma * xi + gamma * conv - gamma**k))))
    return CheckResult("xi_identity", worst, 1e-12)


def check_contraction(rng, count: int = 50) -> list[CheckResult]:
    """Contraction of T^nu and convergence of its fixed-point iteration."""
    slack, fp = -np.inf, 0.0
    for _ in range(count):
        mdp, pi = _problem(rng)
        nu = random_measure(rng, mdp.discount, 16)
        shape = (mdp.num_states, mdp.num_actions)
        for _ in range(2):
            q1, q2 = rng.normal(size=(2, *shape)) * 10
            lhs = sup_error(apply_nu_bellman(mdp, pi, q1, nu), apply_nu_bellman(mdp, pi, q2, nu))
            slack = max(slack, lhs - mdp.discount * sup_error(q1, q2))
        q, _ = nu_fixed_point(mdp, pi, nu, np.zeros(shape), tol=1e-10 * (1 - mdp.discount))
        fp = max(fp, sup_error(q, exact_q(mdp, pi)))
    return [CheckResult("contraction_slack", max(slack, 0.0), 1e-12), CheckResult("fixed_point_error", fp, 1e-8)]


def check_special_cases(rng, count: int = 20) -> list[CheckResult]:
    """n-step and geometric measures reproduce the n-step and TD(lambda) operators."""
    nstep, geo = 0.0, 0.0
    for _ in range(count):
        mdp, pi = _problem(rng)
        q = rng.normal(size=(mdp.num_states, mdp.num_actions))
        n = int(rng.integers(1, 9))
        lam = float(rng.uniform(0.0, 0.99))
        nstep = max(nstep, sup_error(apply_nu_bellman(mdp, pi, q, nstep_measure(n, mdp.discount)), nstep_operator(mdp, pi, q, n)))
        geo = max(geo, sup_error(apply_nu_bellman(mdp, pi, q, geometric_measure(lam, mdp.discount)), td_lambda_operator(mdp, pi, q, lam)))
    return [CheckResult("nstep_collapse", nstep, 1e-10), CheckResult("geometric_collapse", geo, 1e-10)]


def check_mve_equals_td_lambda(rng, count: int = 50) -> CheckResult:
    worst = 0.0
    for _ in range(count):
        mdp, pi = _problem(rng)
        q = rng.normal(size=(mdp.num_states, mdp.num_actions))
        for lam in (0.1, 0.5, 0.8, 0.99):
            worst = max(worst, sup_error(gamma_mve_operator(mdp, pi, q, lam), td_lambda_operator(mdp, pi, q, lam)))
    return CheckResult("mve_equals_td_lambda", worst, 1e-10)


def check_bootstrap(rng, count: int = 10) -> list[CheckResult]:
    tv, ghm = 0.0, 0.0
    for _ in range(count):
        mdp, pi = _problem(rng, max_states=6)
        d = nstep_measures_direct(mdp, pi, 32)
        b = nstep_measures_bootstrap(mdp, pi, 32)
        tv = max(tv, float(0.5 * np.abs(d.m - b.m).sum(axis=-1).max()))
        g = float(rng.uniform(0.1, 0.6))
        depth = int(np.ceil(np.log(1e-14) / np.log(g))) + 1
        table = nstep_measures_direct(mdp, pi, depth)
        marg = marginal_measure(table, HorizonDistribution.winsorized_geometric(g, depth))
        ghm = max(ghm, float(np.abs(marg - successor_measure(mdp, pi, g).m).max()))
    return [CheckResult("bootstrap_tv", tv, 1e-12), CheckResult("geometric_marginal", ghm, 1e-10)]


def check_target_unbiased(rng, draws: int = 100_000) -> list[CheckResult]:
    mdp, pi = _problem(rng, max_states=6, gamma=0.9)
    g = mdp.discount
    k_max = winsorized_kmax(0.8, g, 0.2)
    nu = winsorized_geometric_measure(0.8, g, k_max)
    p_h = HorizonDistribution.winsorized_geometric(0.8 * g, k_max)
    table = nstep_measures_direct(mdp, pi, k_max)
    q = rng.normal(size=(mdp.num_states, mdp.num_actions))
    want = apply_nu_bellman(mdp, pi, q, nu)
    enum = sup_error(expected_target_gnu(table, q, mdp.reward, nu, p_h), want)
    s, a = int(rng.integers(mdp.num_states)), int(rng.integers(mdp.num_actions))
    weights = importance_ratios(nu, None, p_h)
    x = np.array([sample_target_gnu(s, a, mdp.reward[s, a], table, q, mdp.reward, nu, p_h, rng, weights) for _ in range(draws)])
    se = x.std() / np.sqrt(draws)
    z = abs(x.mean() - want[s, a]) / se if se > 0 else 0.0
    return [CheckResult("target_enumeration", enum, 1e-12), CheckResult("target_monte_carlo_z", float(z), 4.0)]


def check_winsorized_forms(rng, count: int = 200) -> list[CheckResult]:
    forms, mass_excess, mass_gap = 0.0, -np.inf, 0.0
    for _ in range(count):
        lam = float(rng.uniform(0.05, 0.99))
        gamma = float(rng.uniform(0.5, 0.999))
        k_max = int(rng.integers(1, 30))
        r = lam * gamma
        k = np.arange(1, k_max + 1)
        nu = winsorized_geometric_measure(lam, gamma, k_max)
        want_nu = np.where(k < k_max, (1 - lam) * r ** (k - 1), r ** (k_max - 1))
        want_xi = np.where(k < k_max, lam * r ** (k - 1), 0.0)
        p_h = HorizonDistribution.winsorized_geometric(r, k_max)
        w_xi, w_nu = importance_ratios(nu, None, p_h)
        want_wxi = np.where(k < k_max, lam / (1 - r), 0.0)
        want_wnu = np.where(k < k_max, (1 - lam) / (1 - r), 1.0)
        forms = max(
            forms,
            float(np.abs(nu.weights(k_max) - want_nu).max()),
            float(np.abs(xi_coefficients(nu, k_max) - want_xi).max()),
            float(np.abs(w_xi - want_wxi).max() / max(1.0, want_wxi.max())),
            float(np.abs(w_nu - want_wnu).max()),
        )
        mass = nu.total_mass()
        mass_excess = max(mass_excess, mass - 1.0)
        if k_max > 1:
            # strictly below one whenever gamma < 1
            mass_gap = max(mass_gap, float(mass >= 1.0))
        mass_gap = max(mass_gap, abs(winsorized_geometric_measure(lam, 1.0, k_max).total_mass() - 1.0))
    return [
        CheckResult("winsorized_closed_forms", forms, 1e-12),
        CheckResult("winsorized_mass_excess", max(mass_excess, 0.0), 1e-12),
        CheckResult("winsorized_mass_equality", mass_gap, 1e-12),
    ]


def check_schedule(rng, count: int = 200) -> list[CheckResult]:
    worst = 0.0
    for _ in range(count):
        lam_f = float(rng.uniform(0.0, 0.99))
        r = np.sort(rng.random(3))
        h = 1.0 / (1.0 - np.array([schedule_lambda(x, lam_f) for x in r]))
        # three points (r_i, h_i) are collinear
        area = (r[1] - r[0]) * (h[2] - h[0]) - (r[2] - r[0]) * (h[1] - h[0])
        ends = abs(1.0 / (1.0 - schedule_lambda(0.0, lam_f)) - 1.0) + abs(
            1.0 / (1.0 - schedule_lambda(1.0, lam_f)) - 1.0 / (1.0 - lam_f)
        )
        worst = max(worst, abs(area), ends)
    # at r = 0 the horizon law collapses onto n = 1
    k_max = winsorized_kmax(schedule_lambda(0.0, 0.8), 0.99, 0.2)
    p_h = HorizonDistribution.winsorized_geometric(schedule_lambda(0.0, 0.8) * 0.99, k_max)
    draws = sample_horizon(p_h, rng, 10_000)
    return [
        CheckResult("schedule_affine", worst, 1e-12),
        CheckResult("schedule_start_horizon", float(np.max(np.abs(draws - 1))), 0.0),
    ]


def core_checks(rng, measures: int = 200, mdps: int = 50, mc_draws: int = 100_000) -> list[CheckResult]:
    out = [check_xi_identity(rng, measures)]
    out += check_contraction(rng, mdps)
    out += check_special_cases(rng)
    out.append(check_mve_equals_td_lambda(rng, mdps))
    out += check_bootstrap(rng)
    out += check_target_unbiased(rng, mc_draws)
    out += check_winsorized_forms(rng, measures)
    out += check_schedule(rng)
    return out


# Neural --------------------------------------------------------------------


def neural_checks(rng, probes: int = 100) -> list[CheckResult]:
    from .agent import FLOW_IN, actor_loss, critic_loss, flow_matching_loss, flow_sample, mix_next_action, reward_loss
    from .nn import EmaPair, Mlp, ema_update, finite_difference_check
    from .toyenv import augment

    b = 12
    s = augment(rng.random((b, 2)), (rng.random(b) < 0.2).astype(float))
    a = rng.uniform(-1, 1, (b, 2))
    r = rng.normal(size=b)

    flow = Mlp([FLOW_IN, 16, 16, 3], rng)
    x0, x1, tau, n = rng.normal(size=(b, 3)), rng.normal(size=(b, 3)), rng.random(b), rng.random(b)
    critic = Mlp([5, 16, 16, 1], rng)
    actor = Mlp([3, 16, 16, 2], rng, output="tanh")
    reward = Mlp([5, 16, 16, 1], rng)
    target = rng.normal(size=b)

    def crit():
        loss, grads = critic_loss([critic], s, a, target)
        return loss, grads[0]

    out = [
        CheckResult("grad_flow", finite_difference_check(lambda: flow_matching_loss(flow, s, a, n, x0, x1, tau), flow.params, probes, rng), 1e-4),
        CheckResult("grad_critic", finite_difference_check(crit, critic.params, probes, rng), 1e-4),
        CheckResult("grad_actor", finite_difference_check(lambda: actor_loss(actor, critic, s, a, 2.5), actor.params, probes, rng), 1e-4),
        CheckResult("grad_reward", finite_difference_check(lambda: reward_loss(reward, s, a, r), reward.params, probes, rng), 1e-4),
    ]

    # midpoint solver is second order on a linear field; unit spectral norm
    # keeps N = 5 steps inside the asymptotic regime
    mat = rng.normal(size=(3, 3))
    mat /= np.linalg.norm(mat, 2)
    noise = rng.normal(size=(20, 3))
    exact = noise @ expm(mat).T
    errs = [np.abs(flow_sample(lambda x, c, t: x @ mat.T, None, noise, k) - exact).max() for k in (5, 50)]
    out.append(CheckResult("flow_order_ratio_gap", abs(np.log10(errs[0] / errs[1]) - 2.0), 0.15))

    draws = 100_000
    mixed = mix_next_action(actor, np.repeat(s[:1], draws, 0), np.full((draws, 2), 5.0), 0.1, 0.3, rng)
    out.append(CheckResult("mixing_frequency_gap", abs(float(np.mean(mixed[:, 0] == 5.0)) - 0.3), 0.006))

    pair = EmaPair(Mlp([3, 4, 1], rng), Mlp([3, 4, 1], rng), eta=0.05)
    d0 = np.concatenate([(sh - p).ravel() for sh, p in zip(pair.shadow.params, pair.live.params)])
    for _ in range(50):
        ema_update(pair)
    d = np.concatenate([(sh - p).ravel() for sh, p in zip(pair.shadow.params, pair.live.params)])
    out.append(CheckResult("ema_closed_form", float(np.abs(d - 0.95**50 * d0).max()), 1e-12))
    return out
