"""Finite MDPs, tabular policies and exact policy evaluation.

State-action pairs are flattened row-major: pair ``(s, a)`` has index
``s * num_actions + a``. Q-tables are plain ``(num_states, num_actions)``
float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import as_rng

ROW_TOL = 1e-12


def _check_distribution(x: np.ndarray, axis: int, name: str) -> None:
    if np.any(x < 0):
        raise ValueError(f"{name} has negative entries")
    sums = x.sum(axis=axis)
    bad = np.abs(sums - 1.0) > ROW_TOL
    if np.any(bad):
        where = np.argwhere(bad)[0]
        raise ValueError(f"{name} row {tuple(where)} sums to {sums[tuple(where)]!r}, not 1")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with (s, a)-dependent rewards.

    ``transition[s, a, s']`` is P(s'|s,a); ``reward[s, a]`` is R(s,a).
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    terminal: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        term = np.asarray(self.terminal, dtype=bool)
        rho = np.asarray(self.initial_dist, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match {p.shape[:2]}")
        if term.shape != (p.shape[0],) or rho.shape != (p.shape[0],):
            raise ValueError("terminal and initial_dist must have one entry per state")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if not np.all(np.isfinite(r)):
            raise ValueError("reward has non-finite entries")
        _check_distribution(p, 2, "transition")
        _check_distribution(rho, 0, "initial_dist")
        for name, value in (("transition", p), ("reward", r), ("terminal", term), ("initial_dist", rho)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TabularMdp):
            return NotImplemented
        return (
            self.discount == other.discount
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.terminal, other.terminal)
            and np.array_equal(self.initial_dist, other.initial_dist)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Stochastic policy table ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {probs.shape}")
        _check_distribution(probs, 1, "policy")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    def total_variation(self, other: "TabularPolicy") -> np.ndarray:
        """Per-state total-variation distance to ``other``."""
        return 0.5 * np.abs(self.probs - other.probs).sum(axis=1)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Offline transitions stored as parallel arrays.

    ``terminals[i]`` marks that ``next_states[i]`` is terminal;
    ``truncated[i]`` marks an episode cut at ``max_len``. An episode
    ends at exactly one of the two unless it hit both at once.
    ``next_actions`` is sampled from the behavior policy for every
    transition, including the last one of each episode.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    terminals: np.ndarray
    truncated: np.ndarray
    episode_starts: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def episode_ends(self) -> np.ndarray:
        """Exclusive end index of each episode."""
        return np.append(self.episode_starts[1:], len(self))

    def episode_index(self) -> np.ndarray:
        """For each transition, the exclusive end index of its episode."""
        ends = self.episode_ends
        lengths = ends - self.episode_starts
        return np.repeat(ends, lengths)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in self.__dataclass_fields__
        )

    __hash__ = None


def state_action_kernel(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """On-policy chain over state-action pairs.

    ``D[(s,a), (s',a')] = P(s'|s,a) * pi(a'|s')``, shape ``(S*A, S*A)``.
    """
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})"
        )
    n_sa = mdp.num_states * mdp.num_actions
    p = mdp.transition.reshape(n_sa, mdp.num_states)
    return (p[:, :, None] * policy.probs[None, :, :]).reshape(n_sa, n_sa)


def exact_q(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Q^pi by a dense solve of ``(I - gamma D) q = r``."""
    d = state_action_kernel(mdp, policy)
    n_sa = d.shape[0]
    try:
        q = np.linalg.solve(np.eye(n_sa) - mdp.discount * d, mdp.reward.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"policy evaluation system is singular: {exc}") from exc
    return q.reshape(mdp.num_states, mdp.num_actions)


def bellman_residual(mdp: TabularMdp, policy: TabularPolicy, q: np.ndarray) -> float:
    """Sup-norm residual of the one-step Bellman equation."""
    d = state_action_kernel(mdp, policy)
    flat = q.reshape(-1)
    return float(np.max(np.abs(mdp.reward.reshape(-1) + mdp.discount * d @ flat - flat)))


def absorb_terminals(mdp: TabularMdp) -> TabularMdp:
    """Turn every terminal state into a zero-reward self-loop."""
    if not mdp.terminal.any():
        return mdp
    p = mdp.transition.copy()
    r = mdp.reward.copy()
    idx = np.flatnonzero(mdp.terminal)
    p[idx] = 0.0
    p[idx, :, idx] = 1.0
    r[idx] = 0.0
    return TabularMdp(p, r, mdp.discount, mdp.terminal.copy(), mdp.initial_dist.copy())


def _draw(cdf_rows: np.ndarray, u: float) -> int:
    k = int(np.searchsorted(cdf_rows, u, side="right"))
    return min(k, len(cdf_rows) - 1)


def generate_dataset(
    mdp: TabularMdp,
    behavior: TabularPolicy,
    episodes: int,
    max_len: int,
    seed,
) -> Dataset:
    """Roll out ``behavior`` from ``rho``; stop at a terminal or after ``max_len`` steps."""
    if episodes < 1 or max_len < 1:
        raise ValueError("episodes and max_len must be >= 1")
    rng = as_rng(seed)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    pi_cdf = np.cumsum(behavior.probs, axis=1)
    rho_cdf = np.cumsum(mdp.initial_dist)

    cols = {k: [] for k in ("s", "a", "r", "s2", "a2", "term", "trunc")}
    starts = []
    for _ in range(episodes):
        starts.append(len(cols["s"]))
        s = _draw(rho_cdf, rng.random())
        a = _draw(pi_cdf[s], rng.random())
        for t in range(max_len):
            s2 = _draw(p_cdf[s, a], rng.random())
            a2 = _draw(pi_cdf[s2], rng.random())
            done = bool(mdp.terminal[s2])
            cols["s"].append(s)
            cols["a"].append(a)
            cols["r"].append(mdp.reward[s, a])
            cols["s2"].append(s2)
            cols["a2"].append(a2)
            cols["term"].append(done)
            cols["trunc"].append(t == max_len - 1 and not done)
            if done:
                break
            s, a = s2, a2
    return Dataset(
        states=np.array(cols["s"], dtype=np.int64),
        actions=np.array(cols["a"], dtype=np.int64),
        rewards=np.array(cols["r"], dtype=np.float64),
        next_states=np.array(cols["s2"], dtype=np.int64),
        next_actions=np.array(cols["a2"], dtype=np.int64),
        terminals=np.array(cols["term"], dtype=bool),
        truncated=np.array(cols["trunc"], dtype=bool),
        episode_starts=np.array(starts, dtype=np.int64),
    )


# Benchmark layouts ---------------------------------------------------------

# up, right, down, left
_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def _grid_mdp(open_cells: np.ndarray, goal: tuple[int, int], noise: float, discount: float) -> TabularMdp:
    rows, cols = open_cells.shape
    coords = [tuple(c) for c in np.argwhere(open_cells)]
    index = {c: i for i, c in enumerate(coords)}
    n = len(coords)
    det = np.zeros((n, len(_MOVES), n))
    for i, (r, c) in enumerate(coords):
        for a, (dr, dc) in enumerate(_MOVES):
            nr, nc = r + dr, c + dc
            ok = 0 <= nr < rows and 0 <= nc < cols and open_cells[nr, nc]
            det[i, a, index[(nr, nc)] if ok else i] = 1.0
    return _finish(det, index[goal], noise, discount)


def _finish(det: np.ndarray, goal: int, noise: float, discount: float) -> TabularMdp:
    n, num_actions, _ = det.shape
    p = (1.0 - noise) * det + noise * det.mean(axis=1, keepdims=True)
    terminal = np.zeros(n, dtype=bool)
    terminal[goal] = True
    reward = p[:, :, goal].copy()
    rho = np.where(terminal, 0.0, 1.0)
    mdp = TabularMdp(p, reward, discount, terminal, rho / rho.sum())
    return absorb_terminals(mdp)


def make_benchmark_mdp(kind: str, size: int, noise: float = 0.0, discount: float = 0.99) -> TabularMdp:
    """Small goal-reaching MDPs.

    ``kind`` is ``"chain"`` (``size`` states in a line, actions left/right),
    ``"gridworld"`` (``size x size`` open grid) or ``"four_rooms"``
    (``size x size`` grid split by a cross of walls with one doorway per
    arm). Entering the goal pays 1 and ends the episode; the goal is the
    last state of the chain or the bottom-right cell. With probability
    ``noise`` the executed action is replaced by a uniformly random one.
    Episodes start uniformly over non-goal states.
    """
    if size < 2:
        raise ValueError(f"size must be >= 2, got {size}")
    if not 0.0 <= noise < 1.0:
        raise ValueError(f"noise must lie in [0, 1), got {noise}")
    if kind == "chain":
        det = np.zeros((size, 2, size))
        for s in range(size):
            det[s, 0, max(s - 1, 0)] = 1.0
            det[s, 1, min(s + 1, size - 1)] = 1.0
        return _finish(det, size - 1, noise, discount)
    if kind == "gridworld":
        return _grid_mdp(np.ones((size, size), dtype=bool), (size - 1, size - 1), noise, discount)
    if kind == "four_rooms":
        if size < 5:
            raise ValueError(f"four_rooms needs size >= 5, got {size}")
        grid = np.ones((size, size), dtype=bool)
        mid = size // 2
        grid[mid, :] = False
        grid[:, mid] = False
        far = mid + (size - mid) // 2
        for r, c in ((mid, mid // 2), (mid, far), (mid // 2, mid), (far, mid)):
            grid[r, c] = True
        return _grid_mdp(grid, (size - 1, size - 1), noise, discount)
    raise ValueError(f"unknown benchmark kind {kind!r}")


def goal_directed_policy(mdp: TabularMdp, greed: float = 0.9) -> TabularPolicy:
    """Mix of the optimal greedy policy (weight ``greed``) and uniform.

    Greedy actions come from value iteration on ``mdp``; ties are split
    evenly.
    """
    s, a = mdp.num_states, mdp.num_actions
    q = np.zeros((s, a))
    for _ in range(10_000):
        v = q.max(axis=1)
        new = mdp.reward + mdp.discount * mdp.transition @ v
        if np.max(np.abs(new - q)) < 1e-12:
            q = new
            break
        q = new
    best = np.isclose(q, q.max(axis=1, keepdims=True), rtol=0.0, atol=1e-9)
    greedy = best / best.sum(axis=1, keepdims=True)
    return TabularPolicy(greed * greedy + (1.0 - greed) / a)


def random_mdp(
    num_states: int,
    num_actions: int,
    rng,
    discount: float | None = None,
    sparsity: float = 0.0,
) -> TabularMdp:
    """Random dense MDP for invariant testing.

    Transition rows are Dirichlet draws with roughly a ``sparsity``
    fraction of entries zeroed; rewards are uniform on [-1, 1].
    """
    rng = as_rng(rng)
    p = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    if sparsity > 0:
        mask = rng.random(p.shape) >= sparsity
        mask[..., 0] |= ~mask.any(axis=2)
        p = p * mask
        p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    g = float(rng.uniform(0.5, 0.95)) if discount is None else discount
    rho = rng.dirichlet(np.ones(num_states))
    return TabularMdp(p, r, g, np.zeros(num_states, dtype=bool), rho)


def random_policy(num_states: int, num_actions: int, rng) -> TabularPolicy:
    return TabularPolicy(as_rng(rng).dirichlet(np.ones(num_actions), size=num_states))
