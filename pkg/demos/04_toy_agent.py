"""
Training the flow-matching agent on the 2D point task
=====================================================

A short run (a few minutes) of the full agent: horizon-conditioned flow
model, critic, reward model and deterministic actor, trained from offline
scripted-plus-random data. The released config trains 50k steps per seed.
"""

import dataclasses
from pathlib import Path

from uhm_lab.agent import flow_prediction_error, load_agent, save_agent, train_agent
from uhm_lab.config import load_config
from uhm_lab.harness import toy_problem
from uhm_lab.toyenv import evaluate

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "neural-toy.conf")
cfg = dataclasses.replace(cfg, neural=dataclasses.replace(cfg.neural, steps=10_000))
env, data, agent = toy_problem(cfg, seed=0)
print(f"dataset: {len(data)} transitions, {int(data.terminals.sum())} reach the goal")


def progress(step, diag, nets):
    if step % 2000 == 0:
        rate = evaluate(env, nets.actor.live, 100, ("demo", step))
        print(f"step {step:6d}  flow {diag['loss_flow']:.3f}  critic {diag['loss_critic']:.3f}  success {rate:.2f}")


nets, rows = train_agent(env, data, agent, ("demo", 0), callback=progress)
print("one-step flow error:", round(flow_prediction_error(nets.flow.shadow, data, agent, ("demo", "flow")), 4))

# Checkpoints are a flat little-endian byte layout.
blob = save_agent(nets)
print(f"checkpoint: {len(blob)} bytes, networks {sorted(load_agent(blob))}")
