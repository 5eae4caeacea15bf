"""Offline actor-critic with a flow-matching universal horizon model.

Each training step draws a horizon ``n`` from the winsorized geometric
distribution, samples a future state ``s_e`` from the horizon model by
bootstrapping through its EMA shadow, and regresses a TD3+BC critic on

    G = r + gamma (w_xi R(s_e, a_e) + w_nu Q_bar(s_e, a_e)).

All states are augmented with a terminal indicator; terminal states are
absorbing with zero reward when targets are built.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .horizons import LambdaSchedule, winsorized_target_weights
from .nn import AdamState, EmaPair, Mlp, adam_update, ema_update, mlp_from_bytes, mlp_to_bytes
from .rng import as_rng
from .toyenv import ACTION_DIM, AUG_DIM, ToyEnv, TransitionData, evaluate, is_terminal

FLOW_IN = AUG_DIM + AUG_DIM + ACTION_DIM + 2


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    lam_final: float = 0.8
    q: float = 0.2
    beta: float = 0.3
    sigma: float = 0.1
    bc_alpha: float = 1.0
    eta: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    n_flow: int = 5
    widths: tuple = (64, 64)
    twin_critic: bool = False
    num_steps: int = 50_000

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        checks = {
            "gamma": 0.0 < self.gamma < 1.0,
            "lam_final": 0.0 <= self.lam_final < 1.0,
            "q": 0.0 < self.q < 1.0,
            "beta": 0.0 <= self.beta <= 1.0,
            "sigma": self.sigma >= 0.0,
            "bc_alpha": self.bc_alpha >= 0.0,
            "eta": 0.0 < self.eta <= 1.0,
            "lr": self.lr > 0.0,
            "batch_size": self.batch_size >= 1,
            "n_flow": self.n_flow >= 1,
            "widths": len(self.widths) >= 1 and min(self.widths) >= 1,
            "num_steps": self.num_steps >= 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ValueError(f"{key} out of range: {getattr(self, key)!r}")

    @property
    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.lam_final, self.q)

    @property
    def horizon_scale(self) -> int:
        """Normaliser for the horizon input: k_max at the final lambda."""
        return self.schedule.max_kmax(self.gamma)


@dataclass(eq=False)
class AgentNets:
    flow: EmaPair
    actor: EmaPair
    critics: list
    reward: EmaPair
    adam: AdamState = field(default=None)

    @classmethod
    def create(cls, config: AgentConfig, rng) -> "AgentNets":
        w, eta = list(config.widths), config.eta
        flow = EmaPair(Mlp([FLOW_IN, *w, AUG_DIM], rng), eta=eta)
        actor = EmaPair(Mlp([AUG_DIM, *w, ACTION_DIM], rng, output="tanh"), eta=eta)
        critics = [EmaPair(Mlp([AUG_DIM + ACTION_DIM, *w, 1], rng), eta=eta) for _ in range(1 + config.twin_critic)]
        reward = EmaPair(Mlp([AUG_DIM + ACTION_DIM, *w, 1], rng), eta=eta)
        nets = cls(flow, actor, critics, reward)
        nets.adam = AdamState.for_params(nets.live_params(), lr=config.lr)
        return nets

    def pairs(self) -> dict:
        out = {"flow": self.flow, "actor": self.actor, "reward": self.reward}
        for i, c in enumerate(self.critics):
            out[f"critic{i}"] = c
        return out

    def live_params(self) -> list:
        return [p for pair in self.pairs().values() for p in pair.live.params]


# Horizon model -------------------------------------------------------------


def _flow_input(x, cond, tau):
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), x.shape[:-1])[..., None]
    return np.concatenate([x, cond, tau], axis=-1)


def flow_condition(s, a, n_norm) -> np.ndarray:
    n_norm = np.broadcast_to(np.asarray(n_norm, dtype=np.float64), np.shape(s)[:-1])[..., None]
    return np.concatenate([s, a, n_norm], axis=-1)


def flow_sample(field, condition, noise, n_flow: int) -> np.ndarray:
    """Integrate dx/dtau = v(x | condition, tau) from tau = 0 to 1 with midpoint steps.

    ``field`` is either an :class:`Mlp` (inputs ``[x, condition, tau]``) or
    a callable ``field(x, condition, tau)``.
    """
    if n_flow < 1:
        raise ValueError(f"n_flow must be >= 1, got {n_flow}")
    v = (lambda x, c, t: field(_flow_input(x, c, t))) if isinstance(field, Mlp) else field
    h = 1.0 / n_flow
    x = np.array(noise, dtype=np.float64)
    for j in range(n_flow):
        t = j * h
        mid = x + 0.5 * h * v(x, condition, t)
        x = x + h * v(mid, condition, t + 0.5 * h)
    return x


def mix_next_action(actor_shadow: Mlp, s_next, a_next, sigma: float, beta: float, rng) -> np.ndarray:
    """Dataset action with probability beta, else mu_bar(s') + N(0, sigma^2) clipped."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    s_next = np.atleast_2d(s_next)
    a_next = np.atleast_2d(a_next)
    keep = rng.random(len(s_next)) < beta
    noisy = actor_shadow(s_next) + sigma * rng.standard_normal(a_next.shape)
    return np.where(keep[:, None], a_next, np.clip(noisy, -1.0, 1.0))


def flow_targets(flow_shadow: Mlp, s_next, a_mix, n, horizon_scale: int, n_flow: int, x0) -> np.ndarray:
    """Bootstrap endpoint s_e^1 for each row.

    n = 1 rows take the dataset next state; rows whose next state is
    terminal stay there (absorbing); the rest integrate the shadow field
    conditioned on (s', a~', n - 1) from the shared noise ``x0``.
    """
    n = np.asarray(n)
    x1 = np.array(s_next, dtype=np.float64)
    boot = (n > 1) & ~is_terminal(s_next)
    if boot.any():
        cond = flow_condition(s_next[boot], a_mix[boot], (n[boot] - 1) / horizon_scale)
        x1[boot] = flow_sample(flow_shadow, cond, x0[boot], n_flow)
    return x1


def flow_matching_loss(flow: Mlp, s, a, n_norm, x0, x1, tau):
    """mean ||v(x_tau | s, a, n, tau) - (x1 - x0)||^2 with x_tau on the straight path."""
    tau = np.asarray(tau, dtype=np.float64)
    x_tau = (1.0 - tau[:, None]) * x0 + tau[:, None] * x1
    out, cache = flow.forward(_flow_input(x_tau, flow_condition(s, a, n_norm), tau))
    resid = out - (x1 - x0)
    b = len(resid)
    grads, _ = flow.backward(cache, 2.0 * resid / b)
    return float(np.sum(resid * resid) / b), grads


def uhm_flow_loss(flow: EmaPair, s, a, s_next, n, a_mix, horizon_scale: int, n_flow: int, rng):
    """Coupled flow-matching loss: one noise draw is both ODE start and path base.

    Returns ``(loss, grads, x1)`` where ``x1`` is the sampled future state.
    """
    n = np.asarray(n)
    x0 = rng.standard_normal(np.shape(s_next))
    x1 = flow_targets(flow.shadow, s_next, a_mix, n, horizon_scale, n_flow, x0)
    tau = rng.random(len(n))
    loss, grads = flow_matching_loss(flow.live, s, a, n / horizon_scale, x0, x1, tau)
    return loss, grads, x1


def interpret_state(x: np.ndarray) -> np.ndarray:
    """Project a generated augmented state onto valid ones.

    Position is clipped to the arena and the indicator thresholded at 0.5.
    """
    out = np.clip(x, 0.0, 1.0)
    out[..., -1] = is_terminal(x)
    return out


# Actor-critic --------------------------------------------------------------


def _sa(s, a):
    return np.concatenate([s, a], axis=-1)


def td_target(r, s_e, a_e, w_xi, w_nu, gamma: float, reward_net: Mlp, critic_shadows) -> np.ndarray:
    """r + gamma (w_xi R(s_e, a_e) + w_nu min_i Q_bar_i(s_e, a_e)); zero continuation at terminal s_e."""
    x = _sa(s_e, a_e)
    q_bar = np.min([c(x)[:, 0] for c in critic_shadows], axis=0)
    cont = w_xi * reward_net(x)[:, 0] + w_nu * q_bar
    return r + gamma * np.where(is_terminal(s_e), 0.0, cont)


def critic_loss(critics, s, a, target):
    """Sum over critics of mean (Q_i(s, a) - G)^2; grads listed per critic."""
    x = _sa(s, a)
    b = len(target)
    total, grads = 0.0, []
    for c in critics:
        out, cache = c.forward(x)
        resid = out[:, 0] - target
        total += float(resid @ resid / b)
        grads.append(c.backward(cache, (2.0 * resid / b)[:, None])[0])
    return total, grads


def actor_loss(actor: Mlp, critic: Mlp, s, a, alpha: float):
    """mean alpha ||mu(s) - a||^2 - Q(s, mu(s)), gradient through the actor only."""
    mu, cache = actor.forward(s)
    b = len(s)
    qv, q_cache = critic.forward(_sa(s, mu))
    _, dx = critic.backward(q_cache, np.full((b, 1), -1.0 / b))
    diff = mu - a
    loss = float(alpha * np.sum(diff * diff) / b - np.sum(qv) / b)
    grad_mu = 2.0 * alpha * diff / b + dx[:, s.shape[1] :]
    return loss, actor.backward(cache, grad_mu)[0]


def reward_loss(reward_net: Mlp, s, a, r):
    out, cache = reward_net.forward(_sa(s, a))
    resid = out[:, 0] - r
    b = len(r)
    return float(resid @ resid / b), reward_net.backward(cache, (2.0 * resid / b)[:, None])[0]


def train_step(nets: AgentNets, batch: TransitionData, progress: float, config: AgentConfig, rng) -> dict:
    """One full update; mutates ``nets`` and returns scalar diagnostics."""
    g = config.gamma
    lam, k_max, p_h = config.schedule.at(progress, g)
    w_xi, w_nu = winsorized_target_weights(lam, g, k_max)
    b = len(batch)
    n = p_h.sample(rng, b)
    s, a, r, s2 = batch.states, batch.actions, batch.rewards, batch.next_states

    a_mix = mix_next_action(nets.actor.shadow, s2, batch.next_actions, config.sigma, config.beta, rng)
    l_v, g_v, x1 = uhm_flow_loss(nets.flow, s, a, s2, n, a_mix, config.horizon_scale, config.n_flow, rng)
    s_e = interpret_state(x1)

    a_e = np.clip(nets.actor.shadow(s_e) + config.sigma * rng.standard_normal((b, ACTION_DIM)), -1.0, 1.0)
    shadows = [c.shadow for c in nets.critics]
    target = td_target(r, s_e, a_e, w_xi[n - 1], w_nu[n - 1], g, nets.reward.live, shadows)
    lives = [c.live for c in nets.critics]
    l_q, g_q = critic_loss(lives, s, a, target)
    l_pi, g_pi = actor_loss(nets.actor.live, lives[0], s, a, config.bc_alpha)
    l_r, g_r = reward_loss(nets.reward.live, s, a, r)

    grads = g_v + g_pi + g_r + [x for gc in g_q for x in gc]
    adam_update(nets.live_params(), grads, nets.adam)
    for pair in nets.pairs().values():
        ema_update(pair)
    return {
        "loss_flow": l_v,
        "loss_critic": l_q,
        "loss_actor": l_pi,
        "loss_reward": l_r,
        "lambda": lam,
        "k_max": k_max,
        "n_hist": np.bincount(n, minlength=k_max + 1)[1:],
    }


def flow_prediction_error(flow: Mlp, data: TransitionData, config: AgentConfig, seed, queries: int = 32, samples: int = 256):
    """Mean distance between the n = 1 sample mean and the logged next position.

    Uses ``queries`` non-terminal transitions, ``samples`` flow draws each,
    and measures error on the position coordinates only.
    """
    rng = as_rng(seed)
    pool = np.flatnonzero(~data.terminals)
    idx = rng.choice(pool, size=min(queries, len(pool)), replace=False)
    errs = []
    for i in idx:
        cond = flow_condition(
            np.repeat(data.states[i][None], samples, 0),
            np.repeat(data.actions[i][None], samples, 0),
            1.0 / config.horizon_scale,
        )
        x = flow_sample(flow, cond, rng.standard_normal((samples, AUG_DIM)), config.n_flow)
        errs.append(np.linalg.norm(x[:, :2].mean(axis=0) - data.next_states[i, :2]))
    return float(np.mean(errs))


def train_agent(env: ToyEnv, data: TransitionData, config: AgentConfig, seed, eval_every: int = 0, eval_episodes: int = 100, callback=None):
    """Run ``config.num_steps`` updates; returns (nets, rows).

    Rows are ``(step, metric, value)`` tuples: losses every ``eval_every``
    steps plus success rate if ``eval_every > 0``, and always at the end.
    """
    rng = as_rng(seed)
    nets = AgentNets.create(config, rng)
    total = config.num_steps
    rows = []
    for t in range(total):
        idx = rng.integers(0, len(data), size=config.batch_size)
        diag = train_step(nets, data.batch(idx), t / total, config, rng)
        step = t + 1
        if (eval_every and step % eval_every == 0) or step == total:
            for k in ("loss_flow", "loss_critic", "loss_actor", "loss_reward"):
                rows.append((step, k, diag[k]))
            rows.append((step, "success_rate", evaluate(env, nets.actor.live, eval_episodes, (seed, "eval"))))
        if callback is not None:
            callback(step, diag, nets)
    return nets, rows


# Checkpoints ---------------------------------------------------------------

BUNDLE_MAGIC = b"UHMAGENT"
BUNDLE_VERSION = 1


def save_agent(nets: AgentNets) -> bytes:
    """Bundle of named MLP blobs: live and shadow for each network."""
    items = []
    for name, pair in nets.pairs().items():
        items.append((name, pair.live))
        items.append((name + ".shadow", pair.shadow))
    out = [BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(items))]
    for name, net in items:
        key = name.encode("utf-8")
        blob = mlp_to_bytes(net)
        out += [struct.pack("<I", len(key)), key, struct.pack("<Q", len(blob)), blob]
    return b"".join(out)


def load_agent(blob: bytes) -> dict:
    """Inverse of :func:`save_agent`; returns ``{name: Mlp}``."""
    if blob[: len(BUNDLE_MAGIC)] != BUNDLE_MAGIC:
        raise ValueError("not an agent bundle (bad magic)")
    off = len(BUNDLE_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    if version != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    off += 8
    nets = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + klen].decode("utf-8")
        off += klen
        (blen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        nets[name], used = mlp_from_bytes(blob[off : off + blen])
        if used != blen:
            raise ValueError(f"corrupt entry {name!r}")
        off += blen
    return nets
