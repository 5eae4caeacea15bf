"""Exact value operators on finite MDPs.

All operators map a Q-table of shape (S, A) to a new one. They work on the
flattened state-action chain ``D`` from :func:`state_action_kernel`, where
``(D**k r)(s, a) = E[R(s_k, a_k) | s_0 = s, a_0 = a, pi]``.
"""

from __future__ import annotations

import numpy as np

from .horizons import (
    HorizonDistribution,
    HorizonMeasure,
    importance_ratios,
    xi_coefficients,
    xi_tail,
)
from .mdp import TabularMdp, TabularPolicy, exact_q, state_action_kernel
from .measures import NStepMeasureTable, successor_measure


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"no convergence after {iterations} iterations (last change {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


def _flat(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"Q shape {q.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})")
    return q.reshape(-1)


def apply_nu_bellman(mdp: TabularMdp, policy: TabularPolicy, q: np.ndarray, nu: HorizonMeasure) -> np.ndarray:
    """T^nu Q = r + gamma sum_k [xi(k) D^k r + nu(k) D^k q].

    Leading atoms are summed term by term. A geometric tail
    nu(k) = c rho**(k-k0) contributes through closed-form resolvents, using
    xi(k) = A gamma**(k-k0) + B rho**(k-k0) on the tail.
    """
    g = mdp.discount
    qf = _flat(mdp, q)
    r = mdp.reward.reshape(-1)
    d = state_action_kernel(mdp, policy)
    n_atoms = len(nu.atoms)
    xi = xi_coefficients(nu, max(n_atoms, 1), g)

    acc = np.zeros_like(r)
    dr, dq = r.copy(), qf.copy()
    for k in range(1, n_atoms + 1):
        dr, dq = d @ dr, d @ dq
        acc += xi[k - 1] * dr + nu.atoms[k - 1] * dq

    if nu.has_tail:
        # dr, dq now hold D^{k0-1} r, D^{k0-1} q
        a_coef, b_coef = xi_tail(nu, g)
        eye = np.eye(len(r))
        rho = nu.tail_ratio
        dr, dq = d @ dr, d @ dq
        acc += b_coef * np.linalg.solve(eye - rho * d, dr)
        acc += nu.tail_scale * np.linalg.solve(eye - rho * d, dq)
        if a_coef != 0.0:
            acc += a_coef * np.linalg.solve(eye - g * d, dr)
    elif n_atoms == 0:
        # nu = 0: all reward stays un-bootstrapped, xi(k) = gamma**(k-1)
        acc += np.linalg.solve(np.eye(len(r)) - g * d, d @ r)
    elif xi[-1] != 0.0:
        # past the atoms xi(k) = gamma**(k-K) xi(K)
        acc += g * xi[-1] * np.linalg.solve(np.eye(len(r)) - g * d, d @ dr)
    return (r + g * acc).reshape(q.shape)


def nu_fixed_point(
    mdp: TabularMdp,
    policy: TabularPolicy,
    nu: HorizonMeasure,
    q0: np.ndarray,
    tol: float,
    max_iter: int = 100_000,
) -> tuple[np.ndarray, int]:
    """Iterate T^nu until the sup-norm change is at most ``tol``."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    q = np.asarray(q0, dtype=np.float64)
    change = np.inf
    for it in range(1, max_iter + 1):
        new = apply_nu_bellman(mdp, policy, q, nu)
        change = float(np.max(np.abs(new - q)))
        q = new
        if change <= tol:
            return q, it
    raise ConvergenceError(max_iter, change)


def nstep_operator(mdp: TabularMdp, policy: TabularPolicy, q: np.ndarray, n: int) -> np.ndarray:
    """Expected n-step return sum_{k<n} gamma^k D^k r + gamma^n D^n q."""
    g = mdp.discount
    d = state_action_kernel(mdp, policy)
    r = mdp.reward.reshape(-1)
    out = np.zeros_like(r)
    dr = r.copy()
    for k in range(n):
        out += g**k * dr
        dr = d @ dr
    dq = np.linalg.matrix_power(d, n) @ _flat(mdp, q)
    return (out + g**n * dq).reshape(q.shape)


def td_lambda_operator(mdp: TabularMdp, policy: TabularPolicy, q: np.ndarray, lam: float) -> np.ndarray:
    """Expected lambda-return: (I - lam gamma D)^-1 [r + (1 - lam) gamma D q]."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    g = mdp.discount
    d = state_action_kernel(mdp, policy)
    rhs = mdp.reward.reshape(-1) + (1.0 - lam) * g * (d @ _flat(mdp, q))
    return np.linalg.solve(np.eye(len(rhs)) - lam * g * d, rhs).reshape(q.shape)


def _successor_expectation(mdp, policy, lam, f):
    """E_{s_e ~ m, a_e ~ pi}[f(s_e, a_e)] under the lam*gamma successor measure."""
    g = mdp.discount
    if lam * g >= 1.0:
        raise ValueError("lambda * gamma must be < 1")
    m = successor_measure(mdp, policy, lam * g).m
    v = np.einsum("xb,xb->x", policy.probs, f)
    return m @ v


def gamma_mve_operator(mdp: TabularMdp, policy: TabularPolicy, q: np.ndarray, lam: float) -> np.ndarray:
    """Single-sample GHM value expansion with discount lam*gamma.

    Q' = r + gamma E_{s_e ~ m, a_e ~ pi}[lam/(1-lam g) R + (1-lam)/(1-lam g) Q]
    where m is the lam*gamma successor measure. These weights make the
    target equal to the expected lambda-return.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    g = mdp.discount
    _flat(mdp, q)
    z = 1.0 - lam * g
    f = (lam / z) * mdp.reward + ((1.0 - lam) / z) * q
    return mdp.reward + g * _successor_expectation(mdp, policy, lam, f)


def gamma_mve_operator_unnormalized(
    mdp: TabularMdp, policy: TabularPolicy, q: np.ndarray, lam: float
) -> np.ndarray:
    """Value expansion with weights 1/(1-lam g) on R and (1-lam) g/(1-lam g) on Q.

    This is a contraction, but its fixed point is generally not Q^pi and it
    differs from the lambda-return; kept for comparison.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    g = mdp.discount
    _flat(mdp, q)
    z = 1.0 - lam * g
    f = mdp.reward / z + ((1.0 - lam) * g / z) * q
    return mdp.reward + g * _successor_expectation(mdp, policy, lam, f)


def expected_target_gnu(
    table: NStepMeasureTable,
    q: np.ndarray,
    reward: np.ndarray,
    nu: HorizonMeasure,
    p_h: HorizonDistribution,
) -> np.ndarray:
    """E[G^nu] for every (s, a), by summing over n, s_e and a_e.

    ``reward`` is the (S, A) reward table; the root reward is R(s, a).
    """
    w_xi, w_nu = importance_ratios(nu, None, p_h)
    pi = table.policy.probs
    f = w_xi[:, None, None] * reward[None] + w_nu[:, None, None] * q[None]
    v = np.einsum("xb,nxb->nx", pi, f)
    cont = np.einsum("n,nsax,nx->sa", p_h.probs, table.m[: p_h.k_max], v)
    return reward + nu.gamma * cont


def sample_target_gnu(
    s: int,
    a: int,
    r: float,
    table: NStepMeasureTable,
    q: np.ndarray,
    reward: np.ndarray,
    nu: HorizonMeasure,
    p_h: HorizonDistribution,
    rng,
    weights: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """One-sample target G = r + gamma (w_xi R(s_e, a_e) + w_nu Q(s_e, a_e)).

    Draws n ~ p_H, s_e ~ m[n](.|s,a), a_e ~ pi(.|s_e). Pass precomputed
    ``weights`` from :func:`importance_ratios` to skip the support check.
    """
    if p_h.k_max > table.n_max:
        raise ValueError(f"table depth {table.n_max} is below k_max {p_h.k_max}")
    w_xi, w_nu = importance_ratios(nu, None, p_h) if weights is None else weights
    n = p_h.sample(rng)
    row = table.m[n - 1, s, a]
    s_e = min(int(np.searchsorted(np.cumsum(row), rng.random(), side="right")), len(row) - 1)
    pi_row = table.policy.probs[s_e]
    a_e = min(int(np.searchsorted(np.cumsum(pi_row), rng.random(), side="right")), len(pi_row) - 1)
    return float(r + nu.gamma * (w_xi[n - 1] * reward[s_e, a_e] + w_nu[n - 1] * q[s_e, a_e]))


def sup_error(q: np.ndarray, q_ref: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(q) - np.asarray(q_ref))))


def fixed_point_gap(mdp: TabularMdp, policy: TabularPolicy, nu: HorizonMeasure) -> float:
    """||T^nu Q^pi - Q^pi||_inf."""
    q = exact_q(mdp, policy)
    return sup_error(apply_nu_bellman(mdp, policy, q, nu), q)
