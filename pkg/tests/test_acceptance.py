"""Release criteria. Each test prints one ``PASS``/``FAIL`` line.

The long-running criteria use the released configs under ``configs/``.
"""

import dataclasses
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from uhm_lab.cli import main
from uhm_lab.config import load_config
from uhm_lab.harness import run_suite
from uhm_lab.horizons import (
    HorizonDistribution,
    HorizonMeasure,
    geometric_measure,
    importance_ratios,
    nstep_measure,
    schedule_lambda,
    winsorized_geometric_measure,
    winsorized_kmax,
    xi_coefficients,
)
from uhm_lab.mdp import exact_q, random_mdp, random_policy
from uhm_lab.measures import marginal_measure, nstep_measures_bootstrap, nstep_measures_direct, successor_measure
from uhm_lab.rng import make_rng
from uhm_lab.values import (
    apply_nu_bellman,
    expected_target_gnu,
    gamma_mve_operator,
    nu_fixed_point,
    sample_target_gnu,
    td_lambda_operator,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def report(capsys):
    """Print a PASS/FAIL line past pytest's capture, then assert."""

    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def sub_probability(rng, gamma, max_support=64):
    k = int(rng.integers(1, max_support + 1))
    w = rng.random(k) * (rng.random(k) < 0.7)
    if w.sum() > 0:
        w *= rng.random() / w.sum()
    return HorizonMeasure(gamma, w)


def small_problem(rng, max_states=10, max_actions=3):
    s, a = int(rng.integers(2, max_states + 1)), int(rng.integers(1, max_actions + 1))
    return random_mdp(s, a, rng), random_policy(s, a, rng)


def kernel(mdp, pi):
    """D[(s,a),(s',a')] = P(s'|s,a) pi(a'|s'), built without library helpers."""
    S, A = mdp.num_states, mdp.num_actions
    return np.einsum("sax,xb->saxb", mdp.transition, pi.probs).reshape(S * A, S * A)


def nstep_by_enumeration(mdp, pi, q, n):
    """E[sum_{t<n} gamma^t r_t + gamma^n Q(s_n, a_n)] summed over every path."""
    S, A, g = mdp.num_states, mdp.num_actions, mdp.discount
    out = np.zeros((S, A))
    for s0, a0 in itertools.product(range(S), range(A)):
        total = mdp.reward[s0, a0]
        for path in itertools.product(range(S), range(A), repeat=n):
            states, actions = path[0::2], path[1::2]
            prob, s, a = 1.0, s0, a0
            ret = 0.0
            for t, (s2, a2) in enumerate(zip(states, actions), start=1):
                prob *= mdp.transition[s, a, s2] * pi.probs[s2, a2]
                if prob == 0.0:
                    break
                s, a = s2, a2
                ret += (g**t) * (mdp.reward[s, a] if t < n else q[s, a])
            total += prob * ret
        out[s0, a0] = total
    return out


def lambda_return_series(mdp, pi, q, lam, tol=1e-17):
    """(1 - lam) sum_n lam^(n-1) T_n Q by matrix powers, truncated below ``tol``."""
    d = kernel(mdp, pi)
    g = mdp.discount
    r, qf = mdp.reward.ravel(), q.ravel()
    out = np.zeros_like(r)
    partial = r.copy()  # sum_{t<n} gamma^t D^t r
    power = np.eye(len(r))
    n = 1
    while True:
        nxt = power @ d
        tn = partial + g**n * (nxt @ qf)
        weight = (1 - lam) * lam ** (n - 1)
        out += weight * tn
        if lam**n * np.abs(tn).max() < tol or lam == 0.0:
            break
        partial = partial + g**n * (nxt @ r)
        power = nxt
        n += 1
    return out.reshape(q.shape)


def test_criterion_01_xi_identity(report):
    rng = make_rng("acceptance", 1)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        gamma = (0.9, 0.99, 0.999)[i % 3]
        nu = sub_probability(rng, gamma)
        K = len(nu.atoms) + 10
        xi = xi_coefficients(nu, K)
        w = nu.weights(K)
        for k in range(1, K + 1):
            conv = sum(gamma ** (k - j) * w[j - 1] for j in range(1, k + 1))
            worst = max(worst, abs(gamma * xi[k - 1] + gamma * conv - gamma**k))
    elapsed = time.perf_counter() - start
    report(1, "xi identity", worst <= 1e-12 and elapsed < 1.0, f"max error {worst:.2e} (<= 1e-12), {elapsed:.2f} s (< 1 s)")


def test_criterion_02_contraction(report):
    rng = make_rng("acceptance", 2)
    start = time.perf_counter()
    slack, fp = -np.inf, 0.0
    for _ in range(50):
        mdp, pi = small_problem(rng)
        nu = sub_probability(rng, mdp.discount, 16)
        shape = (mdp.num_states, mdp.num_actions)
        for _ in range(3):
            q1, q2 = rng.normal(scale=10.0, size=(2, *shape))
            lhs = np.abs(apply_nu_bellman(mdp, pi, q1, nu) - apply_nu_bellman(mdp, pi, q2, nu)).max()
            slack = max(slack, lhs - mdp.discount * np.abs(q1 - q2).max())
        q, _ = nu_fixed_point(mdp, pi, nu, np.zeros(shape), tol=1e-10 * (1 - mdp.discount))
        truth = np.linalg.solve(np.eye(q.size) - mdp.discount * kernel(mdp, pi), mdp.reward.ravel()).reshape(shape)
        fp = max(fp, np.abs(q - truth).max())
    elapsed = time.perf_counter() - start
    ok = slack <= 1e-12 and fp <= 1e-8 and elapsed < 30
    report(2, "contraction and convergence", ok, f"slack {slack:.2e} (<= 1e-12), fixed-point error {fp:.2e} (<= 1e-8), {elapsed:.1f} s")


def test_criterion_03_special_cases(report):
    rng = make_rng("acceptance", 3)
    nstep_err, geo_err = 0.0, 0.0
    for _ in range(10):
        mdp, pi = small_problem(rng, max_states=4, max_actions=2)
        q = rng.normal(size=(mdp.num_states, mdp.num_actions))
        for n in range(1, 5):
            got = apply_nu_bellman(mdp, pi, q, nstep_measure(n, mdp.discount))
            nstep_err = max(nstep_err, np.abs(got - nstep_by_enumeration(mdp, pi, q, n)).max())
        for lam in (0.0, 0.3, 0.8, 0.95):
            got = apply_nu_bellman(mdp, pi, q, geometric_measure(lam, mdp.discount))
            geo_err = max(geo_err, np.abs(got - lambda_return_series(mdp, pi, q, lam)).max())
            geo_err = max(geo_err, np.abs(got - td_lambda_operator(mdp, pi, q, lam)).max())
    ok = nstep_err <= 1e-10 and geo_err <= 1e-10
    report(3, "n-step and geometric collapse", ok, f"n-step {nstep_err:.2e}, geometric {geo_err:.2e} (<= 1e-10)")


def test_criterion_04_mve_equals_td_lambda(report):
    rng = make_rng("acceptance", 4)
    worst = 0.0
    for _ in range(50):
        mdp, pi = small_problem(rng)
        q = rng.normal(size=(mdp.num_states, mdp.num_actions))
        for lam in (0.1, 0.5, 0.8, 0.99):
            worst = max(worst, np.abs(gamma_mve_operator(mdp, pi, q, lam) - td_lambda_operator(mdp, pi, q, lam)).max())
    report(4, "gamma-MVE target equals TD(lambda) target", worst <= 1e-10, f"max difference {worst:.2e} (<= 1e-10)")


def test_criterion_05_bootstrap(report):
    rng = make_rng("acceptance", 5)
    tv, ghm = 0.0, 0.0
    for _ in range(10):
        mdp, pi = small_problem(rng, max_states=8)
        d = nstep_measures_direct(mdp, pi, 32).m
        b = nstep_measures_bootstrap(mdp, pi, 32).m
        tv = max(tv, 0.5 * np.abs(d - b).sum(axis=-1).max())
        g = float(rng.uniform(0.1, 0.7))
        depth = int(np.ceil(np.log(1e-15) / np.log(g))) + 1
        marg = marginal_measure(nstep_measures_direct(mdp, pi, depth), HorizonDistribution.winsorized_geometric(g, depth))
        # (1 - g) sum_k g^k Pr(s_{k+1} = x) solved directly
        S, A = mdp.num_states, mdp.num_actions
        want = (1 - g) * np.linalg.solve(np.eye(S * A) - g * kernel(mdp, pi), mdp.transition.reshape(S * A, S))
        ghm = max(ghm, np.abs(marg - want.reshape(S, A, S)).max(), np.abs(successor_measure(mdp, pi, g).m - want.reshape(S, A, S)).max())
    ok = tv <= 1e-12 and ghm <= 1e-10
    report(5, "bootstrap exactness", ok, f"TV {tv:.2e} (<= 1e-12), geometric marginal {ghm:.2e} (<= 1e-10)")


def test_criterion_06_target_unbiased(report):
    rng = make_rng("acceptance", 6)
    mdp, pi = small_problem(rng, max_states=6)
    g = mdp.discount
    k_max = winsorized_kmax(0.8, g, 0.2)
    nu = winsorized_geometric_measure(0.8, g, k_max)
    p_h = HorizonDistribution.winsorized_geometric(0.8 * g, k_max)
    table = nstep_measures_direct(mdp, pi, k_max)
    q = rng.normal(size=(mdp.num_states, mdp.num_actions))
    want = apply_nu_bellman(mdp, pi, q, nu)
    enum = np.abs(expected_target_gnu(table, q, mdp.reward, nu, p_h) - want).max()
    s, a = 0, mdp.num_actions - 1
    weights = importance_ratios(nu, None, p_h)
    draws = np.array([sample_target_gnu(s, a, mdp.reward[s, a], table, q, mdp.reward, nu, p_h, rng, weights) for _ in range(100_000)])
    z = abs(draws.mean() - want[s, a]) / (draws.std(ddof=1) / np.sqrt(len(draws)))
    ok = enum <= 1e-12 and z <= 4.0
    report(6, "one-sample target unbiased", ok, f"enumeration {enum:.2e} (<= 1e-12), Monte Carlo |z| {z:.2f} (<= 4)")


def test_criterion_07_winsorized_forms(report):
    rng = make_rng("acceptance", 7)
    forms, excess, strict = 0.0, -np.inf, True
    for _ in range(300):
        lam, gamma, k_max = float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.5, 0.999)), int(rng.integers(2, 40))
        r = lam * gamma
        k = np.arange(1, k_max + 1)
        nu = winsorized_geometric_measure(lam, gamma, k_max)
        w_xi, w_nu = importance_ratios(nu, None, HorizonDistribution.winsorized_geometric(r, k_max))
        printed = {
            "nu": np.where(k < k_max, (1 - lam) * r ** (k - 1), r ** (k_max - 1)),
            "xi": np.where(k < k_max, lam * r ** (k - 1), 0.0),
            "w_xi": np.where(k < k_max, lam / (1 - r), 0.0),
            "w_nu": np.where(k < k_max, (1 - lam) / (1 - r), 1.0),
        }
        got = {"nu": nu.weights(k_max), "xi": xi_coefficients(nu, k_max), "w_xi": w_xi, "w_nu": w_nu}
        for key in printed:
            scale = max(1.0, np.abs(printed[key]).max())
            forms = max(forms, np.abs(got[key] - printed[key]).max() / scale)
        mass = nu.total_mass()
        excess = max(excess, mass - 1.0)
        strict &= mass < 1.0
        strict &= abs(winsorized_geometric_measure(lam, 1.0, k_max).total_mass() - 1.0) <= 1e-12
    ok = forms <= 1e-12 and excess <= 1e-12 and strict
    report(7, "winsorized closed forms", ok, f"max deviation {forms:.2e} (<= 1e-12), mass excess {max(excess, 0):.1e}, mass = 1 iff gamma = 1: {strict}")


def test_criterion_08_schedule(report):
    rng = make_rng("acceptance", 8)
    area, ends = 0.0, 0.0
    for _ in range(200):
        lam_f = float(rng.uniform(0.0, 0.99))
        rs = np.sort(rng.random(3))
        h = [1.0 / (1.0 - schedule_lambda(x, lam_f)) for x in rs]
        area = max(area, abs((rs[1] - rs[0]) * (h[2] - h[0]) - (rs[2] - rs[0]) * (h[1] - h[0])))
        ends = max(ends, abs(1 / (1 - schedule_lambda(0.0, lam_f)) - 1), abs(1 / (1 - schedule_lambda(1.0, lam_f)) - 1 / (1 - lam_f)))
    lam0 = schedule_lambda(0.0, 0.8)
    p_h = HorizonDistribution.winsorized_geometric(lam0 * 0.99, winsorized_kmax(lam0, 0.99, 0.2))
    first = set(p_h.sample(rng, 10_000).tolist())
    ok = area <= 1e-12 and ends <= 1e-12 and first == {1}
    report(8, "lambda schedule", ok, f"collinearity {area:.1e}, endpoints {ends:.1e} (<= 1e-12), horizons at r=0: {sorted(first)}")


def test_criterion_09_off_policy_direction(report):
    from uhm_lab.harness import tabular_problem
    from uhm_lab.learning import off_policy_lambda_fixed_point

    cfg = dataclasses.replace(load_config(CONFIGS / "tabular.conf"), methods=("DTD_LAMBDA", "UHM_NU"))
    mdp, policy, behavior, _ = tabular_problem(cfg, cfg.seeds[0])
    # the goal is absorbing, so the policies are only compared where actions matter
    tv = float(policy.total_variation(behavior)[~mdp.terminal].min())
    start = time.perf_counter()
    rows = run_suite(cfg).rows
    elapsed = time.perf_counter() - start
    final = {m: [r.value for r in rows if r.method == m and r.step == cfg.tabular.updates] for m in cfg.methods}
    dtd, uhm = np.mean(final["DTD_LAMBDA"]), np.mean(final["UHM_NU"])
    t = cfg.tabular
    oracle = off_policy_lambda_fixed_point(mdp, behavior, policy, t.lambda_f, winsorized_kmax(t.lambda_f, t.gamma, t.q))
    bias = np.abs(oracle - exact_q(mdp, policy)).max()
    ok = len(final["DTD_LAMBDA"]) == len(final["UHM_NU"]) == 5 and dtd >= 2 * uhm and tv >= 0.4 and elapsed < 300
    report(
        9,
        "off-policy DTD(lambda) vs UHM_NU",
        ok,
        f"mean sup-error DTD {dtd:.4f} vs UHM_NU {uhm:.4f}, ratio {dtd / uhm:.2f} (>= 2); behaviour TV {tv:.2f} (>= 0.4); "
        f"oracle lambda-return bias {bias:.4f}; {elapsed:.0f} s (< 300)",
    )


def test_criterion_10_gradients(report):
    from uhm_lab.agent import FLOW_IN, actor_loss, critic_loss, flow_matching_loss, reward_loss
    from uhm_lab.nn import Mlp, finite_difference_check
    from uhm_lab.toyenv import augment

    rng = make_rng("acceptance", 10)
    b = 16
    s = augment(rng.random((b, 2)), (rng.random(b) < 0.2).astype(float))
    a = rng.uniform(-1, 1, (b, 2))
    flow, critic = Mlp([FLOW_IN, 32, 32, 3], rng), Mlp([5, 32, 32, 1], rng)
    actor, reward = Mlp([3, 32, 32, 2], rng, output="tanh"), Mlp([5, 32, 32, 1], rng)
    x0, x1, tau, n = rng.normal(size=(b, 3)), rng.normal(size=(b, 3)), rng.random(b), rng.random(b)
    target, r = rng.normal(size=b), rng.normal(size=b)

    def crit():
        loss, grads = critic_loss([critic], s, a, target)
        return loss, grads[0]

    errs = {
        "flow": finite_difference_check(lambda: flow_matching_loss(flow, s, a, n, x0, x1, tau), flow.params, 100, rng),
        "critic": finite_difference_check(crit, critic.params, 100, rng),
        "actor": finite_difference_check(lambda: actor_loss(actor, critic, s, a, 1.0), actor.params, 100, rng),
        "reward": finite_difference_check(lambda: reward_loss(reward, s, a, r), reward.params, 100, rng),
    }
    ok = all(e <= 1e-4 for e in errs.values())
    report(10, "finite-difference gradients", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (<= 1e-4)")


def test_criterion_11_toy_agent(report):
    cfg = load_config(CONFIGS / "neural-toy.conf")
    start = time.perf_counter()
    rows = run_suite(cfg).rows
    elapsed = time.perf_counter() - start
    last = cfg.neural.steps
    success = {r.seed: r.value for r in rows if r.metric == "success_rate" and r.step == last}
    flow = {r.seed: r.value for r in rows if r.metric == "flow_error"}
    hits = sum(v >= 0.8 for v in success.values())
    ok = len(success) == 3 and hits >= 2 and max(flow.values()) <= 0.05 and elapsed < 1800
    report(
        11,
        "toy agent",
        ok,
        f"success {success} ({hits}/3 >= 0.8), flow error {{{', '.join(f'{k}: {v:.4f}' for k, v in flow.items())}}} (<= 0.05), "
        f"{elapsed / 60:.1f} min (< 30)",
    )


def test_criterion_12_reproducibility(report, tmp_path):
    cases = {
        "verify-core": (CONFIGS / "verify-core.conf").read_text(),
        "verify-neural": (CONFIGS / "verify-neural.conf").read_text(),
        "tabular": (CONFIGS / "tabular.conf").read_text(),
        "neural-toy": (CONFIGS / "neural-toy.conf").read_text(),
    }
    same = {}
    for suite, text in cases.items():
        conf = tmp_path / f"{suite}.conf"
        if suite == "neural-toy":
            text = text.replace("neural.steps = 50000", "neural.steps = 300").replace("neural.eval_every = 5000", "neural.eval_every = 100")
        conf.write_text(text)
        outs = []
        for run, jobs in enumerate(("1", "2")):
            out = tmp_path / f"{suite}-{run}.csv"
            code = main([suite, "--config", str(conf), "--out", str(out), "--seeds", "1,2", "--jobs", jobs])
            assert code == 0, f"{suite} exited {code}"
            outs.append(out.read_bytes())
        same[suite] = outs[0] == outs[1] and len(outs[0]) > 100
    report(12, "byte-identical reruns", all(same.values()), ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
