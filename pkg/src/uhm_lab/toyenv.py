"""2D point-navigation task with a disk-shaped goal.

States live in the unit square; an action in [-1, 1]^2 moves the point by
``step_size * a`` plus optional Gaussian noise, and the result is clipped to
the arena. Entering the goal disk ends the episode. Agents see the
augmented state ``(x, y, done)`` where ``done`` is the terminal indicator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import as_rng

STATE_DIM = 2
AUG_DIM = 3
ACTION_DIM = 2
# sparse: 1 on entering the goal, else 0
# step:   0 on entering the goal, else -1
# shaped: 0 on entering the goal, else minus the distance to its centre
REWARDS = ("sparse", "step", "shaped")


@dataclass(frozen=True)
class ToyEnv:
    goal: tuple[float, float] = (0.8, 0.8)
    goal_radius: float = 0.1
    step_size: float = 0.1
    noise: float = 0.0
    reward: str = "sparse"
    max_steps: int = 100

    def __post_init__(self):
        if self.reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}, got {self.reward!r}")
        if self.goal_radius <= 0 or self.step_size <= 0 or self.noise < 0 or self.max_steps < 1:
            raise ValueError("goal_radius and step_size must be positive, noise >= 0, max_steps >= 1")

    def in_goal(self, pos: np.ndarray) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64)
        return np.linalg.norm(pos - np.asarray(self.goal), axis=-1) <= self.goal_radius

    def reset(self, rng, size: int | None = None) -> np.ndarray:
        """Uniform start positions outside the goal disk."""
        n = 1 if size is None else size
        out = np.empty((n, STATE_DIM))
        filled = 0
        while filled < n:
            cand = rng.random((n, STATE_DIM))
            cand = cand[~self.in_goal(cand)][: n - filled]
            out[filled : filled + len(cand)] = cand
            filled += len(cand)
        return out[0] if size is None else out

    def step(self, pos: np.ndarray, action: np.ndarray, rng=None):
        """Vectorised transition; returns (next_pos, reward, terminal)."""
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt = np.asarray(pos, dtype=np.float64) + self.step_size * action
        if self.noise > 0:
            nxt = nxt + self.noise * rng.standard_normal(nxt.shape)
        nxt = np.clip(nxt, 0.0, 1.0)
        done = self.in_goal(nxt)
        if self.reward == "sparse":
            r = done.astype(np.float64)
        elif self.reward == "step":
            r = done.astype(np.float64) - 1.0
        else:
            dist = np.linalg.norm(nxt - np.asarray(self.goal), axis=-1)
            r = np.where(done, 0.0, -dist)
        return nxt, r, done

    def goal_direction(self, pos: np.ndarray) -> np.ndarray:
        """Unit vector towards the goal centre (zero at the centre)."""
        d = np.asarray(self.goal) - np.asarray(pos, dtype=np.float64)
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(norm > 0, d / np.where(norm > 0, norm, 1.0), 0.0)


def augment(pos: np.ndarray, done) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    flag = np.broadcast_to(np.asarray(done, dtype=np.float64), pos.shape[:-1])
    return np.concatenate([pos, flag[..., None]], axis=-1)


def is_terminal(aug: np.ndarray) -> np.ndarray:
    """Indicator read off an augmented state, thresholded at one half."""
    return np.asarray(aug)[..., -1] >= 0.5


@dataclass(frozen=True, eq=False)
class TransitionData:
    """Flat transition arrays over augmented states."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def batch(self, idx: np.ndarray) -> "TransitionData":
        return TransitionData(*(getattr(self, f)[idx] for f in _FIELDS))


_FIELDS = ("states", "actions", "rewards", "next_states", "next_actions", "terminals")


def rollout(env: ToyEnv, policy, episodes: int, rng):
    """Run ``policy(pos, rng) -> action`` for ``episodes`` episodes.

    Returns per-episode lists of (positions, actions, rewards, dones).
    """
    out = []
    for _ in range(episodes):
        pos = env.reset(rng)
        ps, acts, rs, ds = [pos], [], [], []
        for _ in range(env.max_steps):
            a = np.clip(policy(pos, rng), -1.0, 1.0)
            pos, r, done = env.step(pos, a, rng)
            acts.append(a)
            rs.append(float(r))
            ds.append(bool(done))
            ps.append(pos)
            if done:
                break
        out.append((np.array(ps), np.array(acts), np.array(rs), np.array(ds)))
    return out


def _to_transitions(episodes, rng, sampler) -> TransitionData:
    cols = {f: [] for f in _FIELDS}
    for ps, acts, rs, ds in episodes:
        t = len(acts)
        flags = np.concatenate([[False], ds])
        aug = augment(ps, flags)
        cols["states"].append(aug[:-1])
        cols["actions"].append(acts)
        cols["rewards"].append(rs)
        cols["next_states"].append(aug[1:])
        # a' is the logged next action; the final step of an episode has none,
        # so draw one from the same behaviour policy
        last = sampler(ps[-1], rng)[None]
        cols["next_actions"].append(np.concatenate([acts[1:], last]) if t > 1 else last)
        cols["terminals"].append(ds)
    return TransitionData(*(np.concatenate(cols[f]) for f in _FIELDS))


def scripted_policy(env: ToyEnv, noise: float = 0.5):
    def act(pos, rng):
        return np.clip(env.goal_direction(pos) + noise * rng.standard_normal(ACTION_DIM), -1.0, 1.0)

    return act


def random_policy(pos, rng):
    return rng.uniform(-1.0, 1.0, size=ACTION_DIM)


def make_toy_dataset(
    env: ToyEnv,
    seed,
    scripted_episodes: int = 200,
    random_episodes: int = 200,
    scripted_noise: float = 0.5,
) -> TransitionData:
    """Noisy goal-seeking episodes followed by uniform-random episodes."""
    rng = as_rng(seed)
    scripted = scripted_policy(env, scripted_noise)
    parts = [
        _to_transitions(rollout(env, scripted, scripted_episodes, rng), rng, scripted),
        _to_transitions(rollout(env, random_policy, random_episodes, rng), rng, random_policy),
    ]
    return TransitionData(*(np.concatenate([getattr(p, f) for p in parts]) for f in _FIELDS))


def evaluate(env: ToyEnv, actor, episodes: int, seed) -> float:
    """Success rate of ``actor(aug_states) -> actions`` run without exploration noise.

    All episodes are stepped together; start states come from ``seed``.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    rng = as_rng(seed)
    pos = env.reset(rng, episodes)
    active = np.ones(episodes, dtype=bool)
    success = np.zeros(episodes, dtype=bool)
    for _ in range(env.max_steps):
        if not active.any():
            break
        act = np.asarray(actor(augment(pos[active], 0.0)))
        nxt, _, done = env.step(pos[active], act, rng)
        pos[active] = nxt
        idx = np.flatnonzero(active)
        success[idx[done]] = True
        active[idx[done]] = False
    return float(success.mean())
