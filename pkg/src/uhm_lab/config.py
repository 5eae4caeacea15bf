"""Experiment configuration as flat ``key = value`` text.

Keys are either top level (``suite``, ``methods``, ``seeds``, ``root_seed``,
``out``)
or carry a dotted section prefix such as ``tabular.lambda_f``. Blank lines
and ``#`` comments are ignored. Lists are comma separated. Every section
has defaults, so a document may be as short as ``suite = verify-core``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .learning import Method

SUITES = ("verify-core", "verify-neural", "tabular", "neural-toy")
TOY_REWARDS = ("sparse", "step", "shaped")


class ConfigError(ValueError):
    """Malformed or out-of-range configuration; ``key`` names the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class TabularParams:
    env: str = "gridworld"
    size: int = 5
    noise: float = 0.2
    gamma: float = 0.9
    episodes: int = 1000
    max_len: int = 100
    policy_greed: float = 0.9
    behavior: str = "uniform"
    lambda_f: float = 0.8
    q: float = 0.2
    step_size: float = 0.005
    updates: int = 200_000
    eval_every: int = 1000
    nstep: int = 3
    model_source: str = "empirical"


@dataclass(frozen=True)
class NeuralParams:
    gamma: float = 0.99
    lambda_f: float = 0.8
    q: float = 0.2
    beta: float = 0.3
    sigma: float = 0.1
    alpha: float = 1.0
    eta: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    n_flow: int = 5
    widths: tuple = (64, 64)
    twin_critic: bool = False
    steps: int = 50_000
    eval_every: int = 5000
    eval_episodes: int = 100


@dataclass(frozen=True)
class EnvParams:
    reward: str = "step"
    noise: float = 0.0
    goal_radius: float = 0.1
    step_size: float = 0.1
    max_steps: int = 100
    scripted_episodes: int = 200
    random_episodes: int = 200
    scripted_noise: float = 0.5


@dataclass(frozen=True)
class VerifyParams:
    measures: int = 200
    mdps: int = 50
    mc_draws: int = 100_000
    probes: int = 100


SECTIONS = {"tabular": TabularParams, "neural": NeuralParams, "env": EnvParams, "verify": VerifyParams}
DEFAULT_METHODS = {
    "verify-core": ("core",),
    "verify-neural": ("neural",),
    "tabular": tuple(m.value for m in Method),
    "neural-toy": ("UHM",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    suite: str
    methods: tuple = ()
    seeds: tuple = (0,)
    root_seed: int = 0
    out: str = ""
    tabular: TabularParams = field(default_factory=TabularParams)
    neural: NeuralParams = field(default_factory=NeuralParams)
    env: EnvParams = field(default_factory=EnvParams)
    verify: VerifyParams = field(default_factory=VerifyParams)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        seeds = tuple(int(s) for s in seeds)
        if not seeds:
            raise ConfigError("seeds", "must not be empty")
        return dataclasses.replace(self, seeds=seeds)


# Parsing -------------------------------------------------------------------


def _parse_value(key: str, text: str, kind):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(x) for x in _split(text))
    except ValueError:
        raise ConfigError(key, f"cannot read {text!r} as {kind.__name__}") from None
    return text


def _split(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _kind(cls, name):
    return {f.name: type(f.default) for f in dataclasses.fields(cls)}[name]


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a configuration document."""
    top: dict = {}
    sections: dict = {name: {} for name in SECTIONS}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(key, "given more than once")
        seen.add(key)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(key, f"unknown section {section!r}")
            cls = SECTIONS[section]
            if name not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(key, "unknown key")
            sections[section][name] = _parse_value(key, value, _kind(cls, name))
        elif key == "suite":
            top["suite"] = value
        elif key == "methods":
            top["methods"] = tuple(_split(value))
        elif key == "seeds":
            top["seeds"] = _parse_value(key, value, tuple)
        elif key == "root_seed":
            top["root_seed"] = _parse_value(key, value, int)
        elif key == "out":
            top["out"] = value
        else:
            raise ConfigError(key, "unknown key")
    if "suite" not in top:
        raise ConfigError("suite", "missing")
    cfg = ExperimentConfig(
        suite=top["suite"],
        methods=top.get("methods", ()),
        seeds=top.get("seeds", (0,)),
        root_seed=top.get("root_seed", 0),
        out=top.get("out", ""),
        **{name: cls(**sections[name]) for name, cls in SECTIONS.items()},
    )
    return validate(cfg)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.suite not in SUITES:
        raise ConfigError("suite", f"must be one of {SUITES}, got {cfg.suite!r}")
    methods = cfg.methods or DEFAULT_METHODS[cfg.suite]
    allowed = DEFAULT_METHODS[cfg.suite]
    for m in methods:
        if m not in allowed:
            raise ConfigError("methods", f"{m!r} is not available in suite {cfg.suite!r}")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods", "duplicate entries")
    if not cfg.seeds:
        raise ConfigError("seeds", "must not be empty")
    if len(set(cfg.seeds)) != len(cfg.seeds) or min(cfg.seeds) < 0:
        raise ConfigError("seeds", "must be distinct non-negative integers")

    t, n, e, v = cfg.tabular, cfg.neural, cfg.env, cfg.verify
    checks = [
        ("tabular.env", t.env in ("chain", "gridworld", "four_rooms"), "must be chain, gridworld or four_rooms"),
        ("tabular.size", t.size >= 2, "must be >= 2"),
        ("tabular.noise", 0.0 <= t.noise < 1.0, "must lie in [0, 1)"),
        ("tabular.gamma", 0.0 < t.gamma < 1.0, "must lie in (0, 1)"),
        ("tabular.episodes", t.episodes >= 1, "must be >= 1"),
        ("tabular.max_len", t.max_len >= 1, "must be >= 1"),
        ("tabular.policy_greed", 0.0 <= t.policy_greed <= 1.0, "must lie in [0, 1]"),
        ("tabular.behavior", t.behavior in ("uniform", "policy"), "must be uniform or policy"),
        ("tabular.lambda_f", 0.0 <= t.lambda_f < 1.0, "must lie in [0, 1)"),
        ("tabular.q", 0.0 < t.q < 1.0, "must lie in (0, 1)"),
        ("tabular.step_size", 0.0 < t.step_size <= 1.0, "must lie in (0, 1]"),
        ("tabular.updates", t.updates >= 1, "must be >= 1"),
        ("tabular.eval_every", t.eval_every >= 1, "must be >= 1"),
        ("tabular.nstep", t.nstep >= 1, "must be >= 1"),
        ("tabular.model_source", t.model_source in ("exact", "empirical"), "must be exact or empirical"),
        ("neural.gamma", 0.0 < n.gamma < 1.0, "must lie in (0, 1)"),
        ("neural.lambda_f", 0.0 <= n.lambda_f < 1.0, "must lie in [0, 1)"),
        ("neural.q", 0.0 < n.q < 1.0, "must lie in (0, 1)"),
        ("neural.beta", 0.0 <= n.beta <= 1.0, "must lie in [0, 1]"),
        ("neural.sigma", n.sigma >= 0.0, "must be >= 0"),
        ("neural.alpha", n.alpha >= 0.0, "must be >= 0"),
        ("neural.eta", 0.0 < n.eta <= 1.0, "must lie in (0, 1]"),
        ("neural.lr", n.lr > 0.0, "must be > 0"),
        ("neural.batch_size", n.batch_size >= 1, "must be >= 1"),
        ("neural.n_flow", n.n_flow >= 1, "must be >= 1"),
        ("neural.widths", len(n.widths) >= 1 and min(n.widths) >= 1, "must be positive integers"),
        ("neural.steps", n.steps >= 1, "must be >= 1"),
        ("neural.eval_every", n.eval_every >= 0, "must be >= 0"),
        ("neural.eval_episodes", n.eval_episodes >= 1, "must be >= 1"),
        ("env.reward", e.reward in TOY_REWARDS, f"must be one of {TOY_REWARDS}"),
        ("env.noise", e.noise >= 0.0, "must be >= 0"),
        ("env.goal_radius", e.goal_radius > 0.0, "must be > 0"),
        ("env.step_size", e.step_size > 0.0, "must be > 0"),
        ("env.max_steps", e.max_steps >= 1, "must be >= 1"),
        ("env.scripted_episodes", e.scripted_episodes >= 0, "must be >= 0"),
        ("env.random_episodes", e.random_episodes >= 0, "must be >= 0"),
        ("env.scripted_noise", e.scripted_noise >= 0.0, "must be >= 0"),
        ("verify.measures", v.measures >= 1, "must be >= 1"),
        ("verify.mdps", v.mdps >= 1, "must be >= 1"),
        ("verify.mc_draws", v.mc_draws >= 100, "must be >= 100"),
        ("verify.probes", v.probes >= 1, "must be >= 1"),
    ]
    for key, ok, message in checks:
        if not ok:
            section, name = key.split(".")
            raise ConfigError(key, f"{message}, got {getattr(getattr(cfg, section), name)!r}")
    if e.scripted_episodes + e.random_episodes < 1:
        raise ConfigError("env.random_episodes", "the toy dataset needs at least one episode")
    return dataclasses.replace(cfg, methods=tuple(methods))


# Serialisation -------------------------------------------------------------


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(x) for x in value)
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Full document with every key spelled out; parses back to ``cfg``."""
    lines = [
        f"suite = {cfg.suite}",
        f"methods = {_format(cfg.methods)}",
        f"seeds = {_format(cfg.seeds)}",
        f"root_seed = {cfg.root_seed}",
    ]
    if cfg.out:
        lines.append(f"out = {cfg.out}")
    for name in SECTIONS:
        params = getattr(cfg, name)
        lines.append("")
        for f in dataclasses.fields(params):
            lines.append(f"{name}.{f.name} = {_format(getattr(params, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
