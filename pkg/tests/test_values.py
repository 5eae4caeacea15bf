import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uhm_lab.horizons import (
    HorizonDistribution,
    HorizonMeasure,
    geometric_measure,
    importance_ratios,
    nstep_measure,
    winsorized_geometric_measure,
    winsorized_kmax,
)
from uhm_lab.mdp import TabularMdp, TabularPolicy, exact_q, make_benchmark_mdp, random_mdp, random_policy
from uhm_lab.measures import nstep_measures_direct
from uhm_lab.values import (
    ConvergenceError,
    apply_nu_bellman,
    expected_target_gnu,
    fixed_point_gap,
    gamma_mve_operator,
    gamma_mve_operator_unnormalized,
    nstep_operator,
    nu_fixed_point,
    sample_target_gnu,
    sup_error,
    td_lambda_operator,
)

seeds = st.integers(0, 2**31 - 1)


def problem(seed, s=6, a=2, gamma=0.9):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(s, a, rng, discount=gamma)
    pi = random_policy(s, a, rng)
    q = rng.normal(size=(s, a)) * 3
    return mdp, pi, q


def one_step(mdp, pi, q):
    v = np.einsum("sa,sa->s", pi.probs, q)
    return mdp.reward + mdp.discount * mdp.transition @ v


def enumerate_nstep(mdp, pi, q, s, a, n):
    """E[sum_{k<n} gamma^k r_k + gamma^n Q(s_n, a_n)] over every path."""
    S, A = mdp.num_states, mdp.num_actions
    g = mdp.discount
    total = 0.0
    for path in itertools.product(range(S), range(A), repeat=n):
        prob, ret = 1.0, mdp.reward[s, a]
        y, b = s, a
        for k in range(n):
            x, c = path[2 * k], path[2 * k + 1]
            prob *= mdp.transition[y, b, x] * pi.probs[x, c]
            if prob == 0.0:
                break
            y, b = x, c
            if k < n - 1:
                ret += g ** (k + 1) * mdp.reward[y, b]
        else:
            total += prob * (ret + g**n * q[y, b])
    return total


class TestNuBellman:
    def test_one_step(self):
        mdp, pi, q = problem(0)
        np.testing.assert_allclose(apply_nu_bellman(mdp, pi, q, nstep_measure(1, 0.9)), one_step(mdp, pi, q), atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_nstep_enumeration(self, n):
        mdp, pi, q = problem(1, s=6, a=2)
        got = apply_nu_bellman(mdp, pi, q, nstep_measure(n, mdp.discount))
        for s, a in [(0, 0), (3, 1), (5, 0)]:
            assert got[s, a] == pytest.approx(enumerate_nstep(mdp, pi, q, s, a, n), abs=1e-10)

    def test_four_step_enumeration(self):
        mdp, pi, q = problem(2, s=4, a=2)
        got = apply_nu_bellman(mdp, pi, q, nstep_measure(4, mdp.discount))
        for s, a in [(0, 1), (3, 0)]:
            assert got[s, a] == pytest.approx(enumerate_nstep(mdp, pi, q, s, a, 4), abs=1e-10)

    @given(seeds, st.integers(1, 12))
    @settings(max_examples=30, deadline=None)
    def test_nstep_operator(self, seed, n):
        mdp, pi, q = problem(seed)
        got = apply_nu_bellman(mdp, pi, q, nstep_measure(n, mdp.discount))
        np.testing.assert_allclose(got, nstep_operator(mdp, pi, q, n), atol=1e-10)

    @given(seeds, st.floats(0.0, 0.99))
    @settings(max_examples=30, deadline=None)
    def test_geometric_is_td_lambda(self, seed, lam):
        mdp, pi, q = problem(seed)
        got = apply_nu_bellman(mdp, pi, q, geometric_measure(lam, mdp.discount))
        np.testing.assert_allclose(got, td_lambda_operator(mdp, pi, q, lam), atol=1e-10)

    def test_zero_measure_is_exact_value(self):
        # no bootstrapping at all: the full discounted return
        mdp, pi, q = problem(3)
        got = apply_nu_bellman(mdp, pi, q, HorizonMeasure(0.9, np.zeros(0)))
        np.testing.assert_allclose(got, exact_q(mdp, pi), atol=1e-10)

    def test_atoms_with_residual_xi(self):
        # sub-probability atoms leave xi > 0 past the support
        mdp, pi, q = problem(4)
        nu = HorizonMeasure(0.9, np.array([0.2, 0.3]))
        q_true = exact_q(mdp, pi)
        assert sup_error(apply_nu_bellman(mdp, pi, q_true, nu), q_true) <= 1e-9

    @given(seeds, st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.floats(0.0, 0.85))
    @settings(max_examples=40, deadline=None)
    def test_contraction(self, seed, raw, tail):
        mdp, pi, _ = problem(seed)
        raw = np.asarray(raw)
        atoms = raw / max(1.0, raw.sum()) * 0.9
        rest = 1.0 - atoms.sum()
        nu = HorizonMeasure(mdp.discount, atoms, tail_scale=rest * (1 - tail) * 0.5, tail_ratio=tail)
        rng = np.random.default_rng(seed)
        for _ in range(5):
            q1, q2 = rng.normal(size=(2, 6, 2)) * 5
            lhs = sup_error(apply_nu_bellman(mdp, pi, q1, nu), apply_nu_bellman(mdp, pi, q2, nu))
            assert lhs <= mdp.discount * sup_error(q1, q2) + 1e-12

    @given(seeds, st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
    @settings(max_examples=30, deadline=None)
    def test_fixed_point_identity(self, seed, raw):
        mdp, pi, _ = problem(seed)
        raw = np.asarray(raw)
        nu = HorizonMeasure(mdp.discount, raw / max(1.0, raw.sum()))
        assert fixed_point_gap(mdp, pi, nu) <= 1e-9

    def test_shape_check(self):
        mdp, pi, _ = problem(5)
        with pytest.raises(ValueError, match="Q shape"):
            apply_nu_bellman(mdp, pi, np.zeros((2, 2)), nstep_measure(1, 0.9))


class TestFixedPoint:
    def test_exact_start(self):
        mdp, pi, _ = problem(6)
        q, it = nu_fixed_point(mdp, pi, geometric_measure(0.5, 0.9), exact_q(mdp, pi), tol=1e-9)
        assert it == 1

    @pytest.mark.parametrize("nu_fn", [lambda g: nstep_measure(2, g), lambda g: winsorized_geometric_measure(0.8, g, 5)])
    def test_contraction_bound(self, nu_fn):
        mdp, pi, _ = problem(7)
        q_true = exact_q(mdp, pi)
        nu = nu_fn(mdp.discount)
        q = np.zeros_like(q_true)
        base = sup_error(q, q_true)
        for n in range(1, 30):
            q = apply_nu_bellman(mdp, pi, q, nu)
            assert sup_error(q, q_true) <= mdp.discount**n * base + 1e-9

    def test_tolerance_and_uniqueness(self):
        mdp, pi, _ = problem(8)
        nu = winsorized_geometric_measure(0.7, 0.9, 4)
        tol = 1e-8
        qa, _ = nu_fixed_point(mdp, pi, nu, np.zeros((6, 2)), tol)
        qb, _ = nu_fixed_point(mdp, pi, nu, np.full((6, 2), 50.0), tol)
        q_true = exact_q(mdp, pi)
        assert sup_error(qa, q_true) <= tol / (1 - mdp.discount)
        assert sup_error(qa, qb) <= 2 * tol / (1 - mdp.discount)

    def test_budget_exhausted(self):
        mdp, pi, _ = problem(9)
        with pytest.raises(ConvergenceError) as err:
            nu_fixed_point(mdp, pi, nstep_measure(1, 0.9), np.zeros((6, 2)), 1e-12, max_iter=3)
        assert err.value.iterations == 3 and err.value.residual > 0

    def test_bad_tol(self):
        mdp, pi, _ = problem(9)
        with pytest.raises(ValueError):
            nu_fixed_point(mdp, pi, nstep_measure(1, 0.9), np.zeros((6, 2)), 0.0)


class TestTdLambda:
    def test_zero_is_one_step(self):
        mdp, pi, q = problem(10)
        np.testing.assert_allclose(td_lambda_operator(mdp, pi, q, 0.0), one_step(mdp, pi, q), atol=1e-12)

    def test_lambda_to_one_is_monte_carlo(self):
        mdp = make_benchmark_mdp("gridworld", 4, noise=0.1, discount=0.9)
        pi = TabularPolicy.uniform(16, 4)
        q = np.random.default_rng(0).normal(size=(16, 4))
        got = td_lambda_operator(mdp, pi, q, 1 - 1e-6)
        np.testing.assert_allclose(got, exact_q(mdp, pi), atol=1e-3)

    def test_mixture_of_nstep(self):
        # (1 - lam) sum lam^{n-1} G^(n), truncated where lam^n is negligible
        mdp, pi, q = problem(11)
        lam = 0.6
        mix = sum((1 - lam) * lam ** (n - 1) * nstep_operator(mdp, pi, q, n) for n in range(1, 80))
        np.testing.assert_allclose(td_lambda_operator(mdp, pi, q, lam), mix, atol=1e-10)

    def test_bad_lambda(self):
        mdp, pi, q = problem(11)
        with pytest.raises(ValueError):
            td_lambda_operator(mdp, pi, q, 1.0)


class TestGammaMve:
    @pytest.mark.parametrize("lam", [0.1, 0.5, 0.8, 0.99])
    def test_equals_td_lambda(self, lam):
        for seed in range(5):
            mdp, pi, q = problem(seed)
            np.testing.assert_allclose(gamma_mve_operator(mdp, pi, q, lam), td_lambda_operator(mdp, pi, q, lam), atol=1e-10)

    def test_absorbing_zero_reward_state(self):
        lam, g = 0.7, 0.9
        mdp = TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), g, np.zeros(1, bool), np.ones(1))
        pi = TabularPolicy(np.ones((1, 1)))
        q = np.array([[2.5]])
        got = gamma_mve_operator(mdp, pi, q, lam)
        assert got[0, 0] == pytest.approx(g * (1 - lam) / (1 - lam * g) * 2.5, abs=1e-14)
        # the printed weighting carries an extra gamma on the Q term
        raw = gamma_mve_operator_unnormalized(mdp, pi, q, lam)
        assert raw[0, 0] == pytest.approx(g * (1 - lam) * g / (1 - lam * g) * 2.5, abs=1e-14)

    def test_small_lambda_limit(self):
        mdp, pi, q = problem(12)
        np.testing.assert_allclose(gamma_mve_operator(mdp, pi, q, 1e-9), one_step(mdp, pi, q), atol=1e-7)

    def test_unnormalized_is_biased(self):
        mdp, pi, q = problem(13)
        assert sup_error(gamma_mve_operator_unnormalized(mdp, pi, q, 0.5), td_lambda_operator(mdp, pi, q, 0.5)) > 1e-3
        q_true = exact_q(mdp, pi)
        assert sup_error(gamma_mve_operator_unnormalized(mdp, pi, q_true, 0.5), q_true) > 1e-3
        assert sup_error(gamma_mve_operator(mdp, pi, q_true, 0.5), q_true) <= 1e-9

    def test_bad_lambda(self):
        mdp, pi, q = problem(13)
        with pytest.raises(ValueError):
            gamma_mve_operator(mdp, pi, q, 0.0)


def winsorized_setup(seed, lam=0.8, q_level=0.2):
    mdp, pi, q = problem(seed)
    g = mdp.discount
    k_max = winsorized_kmax(lam, g, q_level)
    nu = winsorized_geometric_measure(lam, g, k_max)
    p_h = HorizonDistribution.winsorized_geometric(lam * g, k_max)
    table = nstep_measures_direct(mdp, pi, k_max)
    return mdp, pi, q, nu, p_h, table


class TestTargetEstimator:
    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_enumerated_expectation(self, seed):
        mdp, pi, q, nu, p_h, table = winsorized_setup(seed)
        expected = expected_target_gnu(table, q, mdp.reward, nu, p_h)
        np.testing.assert_allclose(expected, apply_nu_bellman(mdp, pi, q, nu), atol=1e-12)

    def test_brute_force_loop(self):
        # independent triple loop over (n, s_e, a_e)
        mdp, pi, q, nu, p_h, table = winsorized_setup(14)
        w_xi, w_nu = importance_ratios(nu, None, p_h)
        want = apply_nu_bellman(mdp, pi, q, nu)
        g = mdp.discount
        for s, a in [(0, 0), (4, 1)]:
            tot = 0.0
            for n in range(1, p_h.k_max + 1):
                for x in range(6):
                    for b in range(2):
                        p = p_h.probs[n - 1] * table[n][s, a, x] * pi.probs[x, b]
                        tot += p * (w_xi[n - 1] * mdp.reward[x, b] + w_nu[n - 1] * q[x, b])
            assert mdp.reward[s, a] + g * tot == pytest.approx(want[s, a], abs=1e-12)

    def test_kmax_one_is_sarsa(self):
        mdp, pi, q = problem(15)
        nu = winsorized_geometric_measure(0.8, mdp.discount, 1)
        p_h = HorizonDistribution(np.ones(1))
        table = nstep_measures_direct(mdp, pi, 1)
        np.testing.assert_allclose(expected_target_gnu(table, q, mdp.reward, nu, p_h), one_step(mdp, pi, q), atol=1e-12)
        w_xi, w_nu = importance_ratios(nu, None, p_h)
        assert (w_xi[0], w_nu[0]) == (0.0, 1.0)

    def test_monte_carlo_mean(self):
        mdp, pi, q, nu, p_h, table = winsorized_setup(16)
        want = apply_nu_bellman(mdp, pi, q, nu)
        weights = importance_ratios(nu, None, p_h)
        rng = np.random.default_rng(17)
        count = 100_000
        s, a = 2, 1
        draws = np.array(
            [sample_target_gnu(s, a, mdp.reward[s, a], table, q, mdp.reward, nu, p_h, rng, weights) for _ in range(count)]
        )
        assert abs(draws.mean() - want[s, a]) <= 4 * draws.std() / np.sqrt(count)

    def test_determinism(self):
        mdp, pi, q, nu, p_h, table = winsorized_setup(18)
        a = [sample_target_gnu(1, 0, 0.0, table, q, mdp.reward, nu, p_h, np.random.default_rng(3)) for _ in range(2)]
        assert a[0] == a[1]

    def test_shallow_table_rejected(self):
        mdp, pi, q, nu, p_h, _ = winsorized_setup(19)
        with pytest.raises(ValueError, match="depth"):
            sample_target_gnu(0, 0, 0.0, nstep_measures_direct(mdp, pi, 1), q, mdp.reward, nu, p_h, np.random.default_rng(0))


def test_tail_ratio_equal_to_gamma_is_rejected():
    mdp, pi, q = problem(20)
    nu = HorizonMeasure(mdp.discount, np.zeros(1), tail_scale=0.05, tail_ratio=mdp.discount)
    with pytest.raises(ValueError, match="not supported"):
        apply_nu_bellman(mdp, pi, q, nu)
