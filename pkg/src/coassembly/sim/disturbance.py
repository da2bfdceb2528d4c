"""Scripted safety scenarios: hazards that stress the safety controller.

Three scripts, each runnable with the safeguard on or off:

  * left_hand: the worker swats at the arm with the left (avoid) hand;
  * early_reach: the worker starts the next block while the robot is
    still swinging the container over, leaning into its path;
  * posture: the plain task performed by a lean-in worker, to compare
    trigger counts against an upright one.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..intention import MLPParams
from ..scenario import (
    CONSERVATIVE,
    PROACTIVE_POSTURE,
    SCRIPTED,
    Scenario,
)
from .human import EARLY_REACH, LEFT_HAND_INCURSION
from .metrics import MetricsLog
from .world import World

HAZARDS = ("left_hand", "early_reach", "posture")


def hazard_scenario(name: str, base: Scenario, seed: int,
                    safety_on: bool = True) -> Scenario:
    """Scenario for one hazard script, robot driven by ground truth."""
    if name not in HAZARDS:
        raise ValueError(f"unknown hazard {name!r}; choose from {HAZARDS}")
    safety = replace(base.safety, safety_enabled=safety_on)
    human = base.human
    hazard = None
    if name == "left_hand":
        hazard = LEFT_HAND_INCURSION
    elif name == "early_reach":
        hazard = EARLY_REACH
        human = replace(human, dwell_duration=0.3)
    else:
        human = replace(human, posture=PROACTIVE_POSTURE)
    return base.with_overrides(mode=SCRIPTED, seed=seed, human=human,
                               safety=safety, hazard=hazard,
                               duration_cap=60.0)


def run_hazard(name: str, base: Scenario, seed: int, safety_on: bool = True,
               max_ticks: int = 700) -> MetricsLog:
    """Run a hazard script for a bounded number of ticks."""
    scenario = hazard_scenario(name, base, seed, safety_on)
    world = World(scenario)
    for _ in range(max_ticks):
        if world.done:
            break
        world.step()
    world.log.completed = world.done
    return world.log


def disturbance_suite(base: Scenario | None = None, seed: int = 0,
                      max_ticks: int = 700) -> dict[str, dict[str, MetricsLog]]:
    """All three hazards, safety on and off, keyed [hazard][on|off]."""
    base = base or Scenario()
    out: dict[str, dict[str, MetricsLog]] = {}
    for name in HAZARDS:
        out[name] = {
            "on": run_hazard(name, base, seed, safety_on=True, max_ticks=max_ticks),
            "off": run_hazard(name, base, seed, safety_on=False, max_ticks=max_ticks),
        }
    return out


def posture_comparison(base: Scenario | None = None, seed: int = 0,
                       max_ticks: int = 1600) -> tuple[MetricsLog, MetricsLog]:
    """(conservative, proactive-posture) runs with identical preferences."""
    base = base or Scenario()
    conservative = base.with_overrides(
        mode=SCRIPTED, seed=seed,
        human=replace(base.human, posture=CONSERVATIVE))
    leaning = base.with_overrides(
        mode=SCRIPTED, seed=seed,
        human=replace(base.human, posture=PROACTIVE_POSTURE))
    logs = []
    for scenario in (conservative, leaning):
        world = World(scenario)
        for _ in range(max_ticks):
            if world.done:
                break
            world.step()
        world.log.completed = world.done
        logs.append(world.log)
    return logs[0], logs[1]
