"""Stochastic tabular policy evaluation with six target constructions.

Every method runs ``Q[s, a] += alpha * (G - Q[s, a])`` on transitions drawn
uniformly from an offline dataset and differs only in how the target ``G``
is built:

ONE_STEP     r + gamma Q(s', a'), a' ~ pi
NSTEP        n-step return along the dataset trajectory, then bootstrap
DTD_LAMBDA   winsorized lambda-return along the dataset trajectory
MBTD_LAMBDA  roll a single-step model n ~ p_H steps under pi
GHM_MVE      one draw from the lam*gamma successor measure of the model
UHM_NU       one draw from the n-step measure of the model, n ~ p_H

Model-based methods use either the true MDP or a maximum-likelihood model
counted from the dataset.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .horizons import (
    HorizonDistribution,
    importance_ratios,
    winsorized_geometric_measure,
    winsorized_kmax,
    xi_coefficients,
)
from .mdp import Dataset, TabularMdp, TabularPolicy, absorb_terminals, exact_q, state_action_kernel
from .measures import nstep_measures_bootstrap, successor_measure
from .rng import as_rng
from .values import expected_target_gnu, gamma_mve_operator


class Method(str, enum.Enum):
    ONE_STEP = "ONE_STEP"
    NSTEP = "NSTEP"
    DTD_LAMBDA = "DTD_LAMBDA"
    MBTD_LAMBDA = "MBTD_LAMBDA"
    GHM_MVE = "GHM_MVE"
    UHM_NU = "UHM_NU"


MODEL_BASED = {Method.MBTD_LAMBDA, Method.GHM_MVE, Method.UHM_NU}


@dataclass(frozen=True)
class LearningConfig:
    method: Method
    nstep: int = 3
    lam_final: float = 0.8
    q: float = 0.2
    step_size: float = 0.1
    num_updates: int = 200_000
    seed: int = 0
    model_source: str = "empirical"
    synchronous: bool = False
    eval_every: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError(f"step_size must lie in (0, 1], got {self.step_size}")
        if self.method is Method.NSTEP and self.nstep < 1:
            raise ValueError(f"NSTEP needs nstep >= 1, got {self.nstep}")
        if not 0.0 <= self.lam_final < 1.0:
            raise ValueError(f"lam_final must lie in [0, 1), got {self.lam_final}")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")
        if self.model_source not in ("exact", "empirical"):
            raise ValueError(f"model_source must be 'exact' or 'empirical', got {self.model_source!r}")
        if self.synchronous and self.method not in MODEL_BASED:
            raise ValueError(f"synchronous sweeps need a model-based method, not {self.method.value}")
        if self.num_updates < 0 or self.eval_every < 1:
            raise ValueError("num_updates must be >= 0 and eval_every >= 1")


@dataclass(frozen=True, eq=False)
class LearningCurve:
    steps: np.ndarray
    errors: np.ndarray
    q: np.ndarray

    @property
    def final_error(self) -> float:
        return float(self.errors[-1])


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    mdp: TabularMdp
    unobserved: np.ndarray


def empirical_model(dataset: Dataset, like: TabularMdp) -> EmpiricalModel:
    """Maximum-likelihood counts; unseen (s, a) become zero-reward self-loops.

    States observed as terminal next-states are made absorbing.
    """
    s_n, a_n = like.num_states, like.num_actions
    counts = np.zeros((s_n, a_n, s_n))
    np.add.at(counts, (dataset.states, dataset.actions, dataset.next_states), 1.0)
    reward_sum = np.zeros((s_n, a_n))
    np.add.at(reward_sum, (dataset.states, dataset.actions), dataset.rewards)
    visits = counts.sum(axis=2)
    unobserved = visits == 0
    safe = np.where(unobserved, 1.0, visits)
    p = counts / safe[:, :, None]
    reward = reward_sum / safe
    ss, aa = np.nonzero(unobserved)
    p[ss, aa, ss] = 1.0
    reward[unobserved] = 0.0
    terminal = np.zeros(s_n, dtype=bool)
    terminal[dataset.next_states[dataset.terminals]] = True
    mdp = TabularMdp(p, reward, like.discount, terminal, like.initial_dist)
    return EmpiricalModel(absorb_terminals(mdp), unobserved)


def off_policy_lambda_fixed_point(
    mdp: TabularMdp,
    behavior: TabularPolicy,
    policy: TabularPolicy,
    lam: float,
    k_max: int,
) -> np.ndarray:
    """Closed-form fixed point of winsorized lambda-returns along behavior trajectories.

    Solves Q = r + gamma sum_k [xi(k) D_b^k r + nu(k) D_b^{k-1} D_pi Q],
    the limit of DTD_LAMBDA on untruncated episodes from ``behavior``.
    """
    g = mdp.discount
    nu = winsorized_geometric_measure(lam, g, k_max)
    xi = xi_coefficients(nu, k_max)
    d_b = state_action_kernel(mdp, behavior)
    d_pi = state_action_kernel(mdp, policy)
    r = mdp.reward.reshape(-1)
    n = len(r)
    rhs = r.copy()
    boot = np.zeros((n, n))
    power = np.eye(n)
    for k in range(1, k_max + 1):
        boot += nu.atoms[k - 1] * power @ d_pi
        power = power @ d_b
        rhs += g * xi[k - 1] * (power @ r)
    q = np.linalg.solve(np.eye(n) - g * boot, rhs)
    return q.reshape(mdp.num_states, mdp.num_actions)


def _cdf(x: np.ndarray) -> np.ndarray:
    c = np.cumsum(x, axis=-1)
    c[..., -1] = np.inf
    return c


class _Learner:
    def __init__(self, mdp, dataset, policy, config, rng):
        self.cfg = config
        self.rng = rng
        self.data = dataset
        self.gamma = g = mdp.discount
        self.pi = policy.probs
        self.pi_cdf = _cdf(policy.probs)
        lam = config.lam_final
        self.lam = lam
        self.k_max = winsorized_kmax(lam, g, config.q)
        self.p_h = HorizonDistribution.winsorized_geometric(lam * g, self.k_max)
        self.nu = winsorized_geometric_measure(lam, g, self.k_max)
        self.xi = xi_coefficients(self.nu, self.k_max)
        self.w_xi, self.w_nu = importance_ratios(self.nu, self.xi, self.p_h)
        self.h_cdf = _cdf(self.p_h.probs)
        self.ends = dataset.episode_index()

        m = config.method
        if m in MODEL_BASED:
            if config.model_source == "exact":
                self.model = mdp
            else:
                self.model = empirical_model(dataset, mdp).mdp
            self.reward = self.model.reward
            if m is Method.UHM_NU or (m is Method.MBTD_LAMBDA and config.synchronous):
                self.table = nstep_measures_bootstrap(self.model, policy, self.k_max)
                self.table_cdf = _cdf(self.table.m)
            if m is Method.MBTD_LAMBDA:
                self.p_cdf = _cdf(self.model.transition)
            if m is Method.GHM_MVE:
                self.ghm_cdf = _cdf(successor_measure(self.model, policy, lam * g).m)
        self.policy = policy

    def _pi(self, s: int) -> int:
        return int(np.searchsorted(self.pi_cdf[s], self.rng.random(), side="right"))

    def _v(self, q, s: int) -> float:
        return float(self.pi[s] @ q[s])

    def target(self, q, i: int) -> float:
        d = self.data
        g = self.gamma
        m = self.cfg.method
        s, a, r = d.states[i], d.actions[i], d.rewards[i]
        if m is Method.ONE_STEP:
            if d.terminals[i]:
                return r
            s2 = d.next_states[i]
            return r + g * q[s2, self._pi(s2)]
        if m is Method.NSTEP:
            end = self.ends[i]
            ret, disc = 0.0, 1.0
            for k in range(self.cfg.nstep):
                j = i + k
                ret += disc * d.rewards[j]
                disc *= g
                if d.terminals[j]:
                    return ret
                if j + 1 == end:
                    break
            s2 = d.next_states[j]
            return ret + disc * q[s2, self._pi(s2)]
        if m is Method.DTD_LAMBDA:
            return self._dtd(q, i)
        rng = self.rng
        n = int(np.searchsorted(self.h_cdf, rng.random(), side="right")) + 1
        if m is Method.UHM_NU:
            s_e = int(np.searchsorted(self.table_cdf[n - 1, s, a], rng.random(), side="right"))
        elif m is Method.MBTD_LAMBDA:
            s_e, a_e = s, a
            for _ in range(n):
                s_e = int(np.searchsorted(self.p_cdf[s_e, a_e], rng.random(), side="right"))
                a_e = self._pi(s_e)
        else:
            s_e = int(np.searchsorted(self.ghm_cdf[s, a], rng.random(), side="right"))
            z = 1.0 - self.lam * g
            a_e = self._pi(s_e)
            return r + g * ((self.lam / z) * self.reward[s_e, a_e] + ((1.0 - self.lam) / z) * q[s_e, a_e])
        if m is Method.UHM_NU:
            a_e = self._pi(s_e)
        return r + g * (self.w_xi[n - 1] * self.reward[s_e, a_e] + self.w_nu[n - 1] * q[s_e, a_e])

    def _dtd(self, q, i: int) -> float:
        d = self.data
        g = self.gamma
        nu, xi = self.nu.atoms, self.xi
        end = self.ends[i]
        total = 0.0
        # step k looks at s_k = next_states[i+k-1] and r_k = rewards[i+k]
        for k in range(1, self.k_max + 1):
            j = i + k - 1
            if d.terminals[j]:
                break
            s_k = d.next_states[j]
            if j + 1 == end:
                # truncated: hand every remaining coefficient to V(s_k)
                coef = g ** (k - 1) - sum(g ** (k - l) * nu[l - 1] for l in range(1, k))
                total += coef * self._v(q, s_k)
                break
            total += nu[k - 1] * self._v(q, s_k)
            if xi[k - 1] != 0.0:
                total += xi[k - 1] * d.rewards[j + 1]
        return d.rewards[i] + g * total

    def sweep_target(self, q) -> np.ndarray:
        m = self.cfg.method
        if m is Method.GHM_MVE:
            return gamma_mve_operator(self.model, self.policy, q, self.lam)
        return expected_target_gnu(self.table, q, self.reward, self.nu, self.p_h)


def run_tabular_learning(
    mdp: TabularMdp,
    dataset: Dataset,
    policy: TabularPolicy,
    config: LearningConfig,
    rng=None,
) -> LearningCurve:
    """Learn Q^pi of ``policy`` from ``dataset`` and record ||Q_t - Q^pi||_inf.

    Errors are recorded at step 0 and every ``eval_every`` updates. In
    synchronous mode one update is a full sweep with the expected target.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = as_rng(config.seed if rng is None else rng)
    q_true = exact_q(mdp, policy)
    learner = _Learner(mdp, dataset, policy, config, rng)
    q = np.zeros_like(q_true)
    alpha = config.step_size
    steps, errors = [0], [float(np.max(np.abs(q - q_true)))]
    block = 4096
    idx = np.empty(0, dtype=np.int64)
    for t in range(1, config.num_updates + 1):
        if config.synchronous:
            q = q + alpha * (learner.sweep_target(q) - q)
        else:
            pos = (t - 1) % block
            if pos == 0:
                idx = rng.integers(0, len(dataset), size=block)
            i = idx[pos]
            s, a = dataset.states[i], dataset.actions[i]
            q[s, a] += alpha * (learner.target(q, i) - q[s, a])
        if t % config.eval_every == 0 or t == config.num_updates:
            steps.append(t)
            errors.append(float(np.max(np.abs(q - q_true))))
    return LearningCurve(np.array(steps), np.array(errors), q)
