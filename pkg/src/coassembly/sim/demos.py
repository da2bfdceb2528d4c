"""Training-data generation from scripted episodes.

Episodes run with the robot driven by ground-truth intention, so no
classifier is needed.  Every tick past the warmup contributes one labeled
window: the reach target while the wrist is actually closing in on it,
Idle otherwise (slow or receding motion never earns a reach label).
"""
from __future__ import annotations

import numpy as np

from ..intention import FEATURE_DIM, LabeledDataset, ORIGINAL, featurize, wrist_position
from ..labels import IDLE, reach_label
from ..scenario import SCRIPTED, Scenario
from .human import GRAB, REACH
from .world import World

IDLE_SPEED_FLOOR = 0.05  # m/s; slower wrists are labeled Idle
WARMUP_TICKS = 5


def _tick_label(phase, target_block, env_history, available) -> str:
    if phase not in (REACH, GRAB) or target_block is None:
        return IDLE
    if len(env_history) < 2:
        return IDLE
    dt = env_history[-1].timestamp - env_history[-2].timestamp
    if dt <= 0:
        return IDLE
    w_now = wrist_position(env_history[-1])
    w_prev = wrist_position(env_history[-2])
    if float(np.linalg.norm(w_now - w_prev)) / dt < IDLE_SPEED_FLOOR:
        return IDLE
    target = available.get(target_block)
    if target is None:
        return IDLE
    approaching = (np.linalg.norm(target - w_prev)
                   - np.linalg.norm(target - w_now)) / dt
    if approaching <= 0:
        return IDLE
    return reach_label(target_block)


def generate_demos(humans, trials_per_model: int, seed: int,
                   base: Scenario | None = None) -> LabeledDataset:
    """Run scripted episodes and label every window with the reach target."""
    base = base or Scenario()
    feats, labels = [], []
    trial_seed = seed
    for human in humans:
        for _ in range(trials_per_model):
            scenario = base.with_overrides(mode=SCRIPTED, human=human,
                                           seed=trial_seed)
            trial_seed += 1
            world = World(scenario)
            tick_count = 0
            while not world.done:
                available = dict(world.available)
                tick = world.step()
                tick_count += 1
                if tick_count <= WARMUP_TICKS:
                    continue
                feats.append(featurize(list(world.env_history), available))
                labels.append(_tick_label(tick.phase, tick.target_block,
                                          list(world.env_history), available))
    return LabeledDataset(np.array(feats).reshape(-1, FEATURE_DIM), labels,
                          [ORIGINAL] * len(labels))
