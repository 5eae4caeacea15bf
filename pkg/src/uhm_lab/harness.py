"""Suite execution and CSV emission.

A suite is a grid of (method, seed) cells. Each cell draws from its own
stream ``make_rng(root_seed, suite, method, seed)``; data shared by all
methods of one seed (the tabular dataset, the toy dataset) comes from
``make_rng(root_seed, suite, "data", seed)``. Cells therefore give the same
rows whether they run serially, in parallel, or in any order, and the
assembled rows are sorted by (method position in the config, seed, step).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .config import ExperimentConfig
from .rng import make_rng

HEADER = ("suite", "method", "seed", "step", "metric", "value")


@dataclass(frozen=True)
class ResultRow:
    suite: str
    method: str
    seed: int
    step: int
    metric: str
    value: float

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "step", int(self.step))
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.metric!r} is not finite: {self.value!r}")
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")


class SuiteError(RuntimeError):
    """A module error raised inside one (method, seed) cell."""

    def __init__(self, method: str, seed: int, cause: BaseException):
        super().__init__(f"[method={method}, seed={seed}] {type(cause).__name__}: {cause}")
        self.method = method
        self.seed = seed


@dataclass(frozen=True)
class SuiteResult:
    rows: tuple
    failures: tuple  # names of failed invariant checks, as "method/seed/check"

    @property
    def ok(self) -> bool:
        return not self.failures


# Cells ---------------------------------------------------------------------


def _check_rows(cfg, method, seed, results):
    rows = []
    for i, res in enumerate(results):
        if math.isfinite(res.value):
            rows.append(ResultRow(cfg.suite, method, seed, i, res.name, res.value))
        rows.append(ResultRow(cfg.suite, method, seed, i, f"{res.name}_tolerance", res.tolerance))
        rows.append(ResultRow(cfg.suite, method, seed, i, f"{res.name}_passed", float(res.passed)))
    return rows


def _verify_core(cfg, method, seed):
    from .checks import core_checks

    v = cfg.verify
    rng = make_rng(cfg.root_seed, cfg.suite, method, seed)
    return _check_rows(cfg, method, seed, core_checks(rng, v.measures, v.mdps, v.mc_draws))


def _verify_neural(cfg, method, seed):
    from .checks import neural_checks

    rng = make_rng(cfg.root_seed, cfg.suite, method, seed)
    return _check_rows(cfg, method, seed, neural_checks(rng, cfg.verify.probes))


def tabular_problem(cfg: ExperimentConfig, seed: int):
    """(mdp, evaluation policy, behaviour policy, dataset) for one seed."""
    from .mdp import TabularPolicy, generate_dataset, goal_directed_policy, make_benchmark_mdp

    t = cfg.tabular
    mdp = make_benchmark_mdp(t.env, t.size, t.noise, t.gamma)
    policy = goal_directed_policy(mdp, t.policy_greed)
    if t.behavior == "uniform":
        behavior = TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    else:
        behavior = policy
    data = generate_dataset(mdp, behavior, t.episodes, t.max_len, make_rng(cfg.root_seed, cfg.suite, "data", seed))
    return mdp, policy, behavior, data


def _tabular(cfg, method, seed):
    from .learning import LearningConfig, run_tabular_learning

    t = cfg.tabular
    mdp, policy, _, data = tabular_problem(cfg, seed)
    lc = LearningConfig(
        method,
        nstep=t.nstep,
        lam_final=t.lambda_f,
        q=t.q,
        step_size=t.step_size,
        num_updates=t.updates,
        model_source=t.model_source,
        eval_every=t.eval_every,
    )
    curve = run_tabular_learning(mdp, data, policy, lc, make_rng(cfg.root_seed, cfg.suite, method, seed))
    return [ResultRow(cfg.suite, method, seed, s, "sup_error", e) for s, e in zip(curve.steps, curve.errors)]


def toy_problem(cfg: ExperimentConfig, seed: int):
    """(env, dataset, agent config) for one seed."""
    from .agent import AgentConfig
    from .toyenv import ToyEnv, make_toy_dataset

    e, n = cfg.env, cfg.neural
    env = ToyEnv(goal_radius=e.goal_radius, step_size=e.step_size, noise=e.noise, reward=e.reward, max_steps=e.max_steps)
    data = make_toy_dataset(
        env,
        make_rng(cfg.root_seed, cfg.suite, "data", seed),
        scripted_episodes=e.scripted_episodes,
        random_episodes=e.random_episodes,
        scripted_noise=e.scripted_noise,
    )
    agent = AgentConfig(
        gamma=n.gamma,
        lam_final=n.lambda_f,
        q=n.q,
        beta=n.beta,
        sigma=n.sigma,
        bc_alpha=n.alpha,
        eta=n.eta,
        lr=n.lr,
        batch_size=n.batch_size,
        n_flow=n.n_flow,
        widths=n.widths,
        twin_critic=n.twin_critic,
        num_steps=n.steps,
    )
    return env, data, agent


def train_toy_cell(cfg: ExperimentConfig, method: str, seed: int):
    """Train one toy agent; returns (nets, rows)."""
    from .agent import flow_prediction_error, train_agent

    env, data, agent = toy_problem(cfg, seed)
    # labels, not generators: the trainer derives its evaluation stream from them
    label = (cfg.root_seed, cfg.suite, method, seed)
    nets, raw = train_agent(env, data, agent, label, cfg.neural.eval_every, cfg.neural.eval_episodes)
    rows = [ResultRow(cfg.suite, method, seed, s, m, v) for s, m, v in raw]
    err = flow_prediction_error(nets.flow.shadow, data, agent, label + ("flow",))
    rows.append(ResultRow(cfg.suite, method, seed, agent.num_steps, "flow_error", err))
    return nets, rows


def _neural_toy(cfg, method, seed):
    return train_toy_cell(cfg, method, seed)[1]


_CELLS = {"verify-core": _verify_core, "verify-neural": _verify_neural, "tabular": _tabular, "neural-toy": _neural_toy}


def run_cell(cfg: ExperimentConfig, method: str, seed: int) -> list[ResultRow]:
    try:
        return _CELLS[cfg.suite](cfg, method, seed)
    except Exception as exc:
        raise SuiteError(method, seed, exc) from exc


# Suites --------------------------------------------------------------------


def _run_cell_args(args):
    return run_cell(*args)


def sort_rows(rows, methods) -> list[ResultRow]:
    order = {m: i for i, m in enumerate(methods)}
    return sorted(rows, key=lambda r: (order.get(r.method, len(order)), r.method, r.seed, r.step))


def run_suite(cfg: ExperimentConfig, jobs: int = 1) -> SuiteResult:
    """Run every (method, seed) cell; verify suites report failed checks."""
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    cells = [(cfg, m, s) for m in cfg.methods for s in cfg.seeds]
    if jobs == 1 or len(cells) == 1:
        parts = [_run_cell_args(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
            parts = list(pool.map(_run_cell_args, cells))
    rows = sort_rows([r for part in parts for r in part], cfg.methods)
    failures = tuple(
        f"{r.method}/{r.seed}/{r.metric[: -len('_passed')]}" for r in rows if r.metric.endswith("_passed") and r.value != 1.0
    )
    return SuiteResult(tuple(rows), failures)


# CSV -----------------------------------------------------------------------


def format_row(row: ResultRow) -> list[str]:
    return [row.suite, row.method, str(row.seed), str(row.step), row.metric, format(row.value, ".17g")]


def write_csv(rows, path) -> None:
    """Header plus one line per row; 17 significant digits, LF, UTF-8."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for row in rows:
            writer.writerow(format_row(row))


def read_csv(path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != HEADER:
            raise ValueError(f"unexpected header {header!r}")
        return [ResultRow(s, m, int(seed), int(step), k, float(v)) for s, m, seed, step, k, v in reader]
