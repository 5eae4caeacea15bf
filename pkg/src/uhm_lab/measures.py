"""Exact n-step transition measures and successor measures on finite MDPs.

Tables are indexed ``m[n-1, s, a, x] = Pr(s_n = x | s_0 = s, a_0 = a, pi)``.
Measures over next state-action pairs are kept factored as a state
measure times the policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .horizons import HorizonDistribution
from .mdp import TabularMdp, TabularPolicy, state_action_kernel


@dataclass(frozen=True, eq=False)
class NStepMeasureTable:
    m: np.ndarray
    policy: TabularPolicy

    def __post_init__(self):
        self.m.setflags(write=False)

    @property
    def n_max(self) -> int:
        return self.m.shape[0]

    def __getitem__(self, n: int) -> np.ndarray:
        """Measure at horizon ``n`` (1-based), shape (S, A, S)."""
        if not 1 <= n <= self.n_max:
            raise IndexError(f"horizon {n} outside 1..{self.n_max}")
        return self.m[n - 1]


@dataclass(frozen=True, eq=False)
class GhmMeasure:
    """Normalized successor measure ``m[s, a, x]`` with discount ``gamma_tilde``."""

    m: np.ndarray
    gamma_tilde: float


def _state_kernel(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """P_pi[y, x] = sum_b pi(b|y) P(x|y,b)."""
    return np.einsum("yb,ybx->yx", policy.probs, mdp.transition)


def nstep_measures_direct(mdp: TabularMdp, policy: TabularPolicy, n_max: int) -> NStepMeasureTable:
    """Propagate the state distribution forward one policy step at a time."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    p_pi = _state_kernel(mdp, policy)
    out = np.empty((n_max,) + mdp.transition.shape)
    out[0] = mdp.transition
    for n in range(1, n_max):
        out[n] = out[n - 1] @ p_pi
    return NStepMeasureTable(out, policy)


def bootstrap_step(mdp: TabularMdp, policy: TabularPolicy, m_n: np.ndarray) -> np.ndarray:
    """m[n+1](x|s,a) = E_{s'~P, a'~pi}[m[n](x|s',a')]."""
    mixed = np.einsum("yb,ybx->yx", policy.probs, m_n)
    return mdp.transition @ mixed


def nstep_measures_bootstrap(mdp: TabularMdp, policy: TabularPolicy, n_max: int) -> NStepMeasureTable:
    """Build the table by the one-step bootstrap recursion from m[1] = P."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    out = np.empty((n_max,) + mdp.transition.shape)
    out[0] = mdp.transition
    for n in range(1, n_max):
        out[n] = bootstrap_step(mdp, policy, out[n - 1])
    return NStepMeasureTable(out, policy)


def successor_measure(mdp: TabularMdp, policy: TabularPolicy, gamma_tilde: float) -> GhmMeasure:
    """(1 - g) sum_k g**k Pr(s_{k+1} = x | s, a), solved against (I - g D)."""
    if not 0.0 < gamma_tilde < 1.0:
        raise ValueError(f"gamma_tilde must lie in (0, 1), got {gamma_tilde}")
    s, a = mdp.num_states, mdp.num_actions
    d = state_action_kernel(mdp, policy)
    p = mdp.transition.reshape(s * a, s)
    m = (1.0 - gamma_tilde) * np.linalg.solve(np.eye(s * a) - gamma_tilde * d, p)
    return GhmMeasure(m.reshape(s, a, s), gamma_tilde)


def marginal_measure(table: NStepMeasureTable, p_h: HorizonDistribution) -> np.ndarray:
    """sum_k p_H(k) m[k], shape (S, A, S)."""
    if p_h.k_max > table.n_max:
        raise ValueError(f"p_H reaches horizon {p_h.k_max} but the table stops at {table.n_max}")
    return np.tensordot(p_h.probs, table.m[: p_h.k_max], axes=1)


def sample_future(table: NStepMeasureTable, s: int, a: int, n: int, rng) -> int:
    """Draw x ~ m[n](.|s,a) by inverse CDF."""
    row = table[n][s, a]
    k = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    return min(k, len(row) - 1)


def compose(table: NStepMeasureTable, n: int, k: int) -> np.ndarray:
    """Chapman-Kolmogorov: m[n+k] from m[n] followed by pi and m[k]."""
    mixed = np.einsum("yb,ybx->yx", table.policy.probs, table[k])
    return table[n] @ mixed
