"""Scenario configuration: one JSON-serializable document drives a run.

Everything a run needs lives here: the arm, the safety flags, the task
plan, the table layout, display poses, the human model and the controller
and planner parameters.  A scenario plus its seed fully determines a run.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import ALLOW, AVOID, ArmModel, Capsule, Pose, SafetySpec, default_arm_model
from .planner import PlannerParams
from .policy import PolicyTable, default_display_poses
from .safe_control import SafetyParams
from .task_graph import TaskGraph, build_task_graph

BASELINE = "baseline"
PROACTIVE = "proactive"
SCRIPTED = "scripted"  # robot driven by ground-truth intention (demo recording)

TICK = 1.0 / 30.0

HUMAN_CAPSULE_LABELS = (
    "head", "neck", "torso", "pelvis",
    "left_upper_arm", "left_forearm", "left_hand",
    "right_upper_arm", "right_forearm", "right_hand",
)

CONSERVATIVE = "conservative"
PROACTIVE_POSTURE = "proactive"


@dataclass
class HumanModel:
    """Scripted worker: insertion preference, reach dynamics and posture."""
    name: str = "subject_a"
    surface_order: tuple[int, ...] = (1, 2, 3, 4)
    block_orders: dict[int, tuple[int, ...]] = field(default_factory=dict)
    reach_speed: float = 0.8          # m/s wrist cruise speed
    reach_accel: float = 3.0          # m/s^2 trapezoid ramp
    grab_duration: float = 0.5        # s
    insertion_duration: float = 2.0   # s
    dwell_duration: float = 1.0       # s pause after each insertion
    position_noise: float = 0.02      # m, sigma on reach targets
    posture: str = CONSERVATIVE
    command_latency: float = 1.0      # s, baseline mode thinking time

    def __post_init__(self):
        if sorted(self.surface_order) != [1, 2, 3, 4]:
            raise ValueError("surface_order must be a permutation of 1..4")
        if self.posture not in (CONSERVATIVE, PROACTIVE_POSTURE):
            raise ValueError(f"unknown posture {self.posture!r}")
        for v in (self.reach_speed, self.grab_duration, self.insertion_duration):
            if v <= 0:
                raise ValueError("speeds and durations must be positive")

    def insertion_sequence(self, surface_blocks: dict[int, tuple[int, ...]]):
        seq = []
        for s in self.surface_order:
            seq.extend(self.block_orders.get(s, surface_blocks[s]))
        return seq


def default_human_models() -> list[HumanModel]:
    """Five workers with distinct preferences, speeds and postures."""
    return [
        HumanModel(name="subject_a", surface_order=(1, 2, 3, 4),
                   reach_speed=0.80, dwell_duration=1.00),
        HumanModel(name="subject_b", surface_order=(3, 1, 4, 2),
                   block_orders={3: (9, 7, 8), 1: (2, 3, 1)},
                   reach_speed=0.90, dwell_duration=0.85),
        HumanModel(name="subject_c", surface_order=(4, 3, 2, 1),
                   block_orders={4: (12, 11, 10)},
                   reach_speed=0.70, dwell_duration=1.20,
                   posture=PROACTIVE_POSTURE),
        HumanModel(name="subject_d", surface_order=(2, 4, 1, 3),
                   block_orders={2: (6, 4, 5)},
                   reach_speed=0.85, dwell_duration=0.95),
        HumanModel(name="subject_e", surface_order=(1, 3, 2, 4),
                   block_orders={1: (3, 1, 2)},
                   reach_speed=0.75, dwell_duration=1.10,
                   posture=PROACTIVE_POSTURE),
    ]


def default_block_layout() -> dict[int, np.ndarray]:
    """Twelve blocks in four lateral clusters on the table."""
    clusters = {
        1: (0.84, 0.30),
        2: (0.94, 0.11),
        3: (0.94, -0.11),
        4: (0.84, -0.30),
    }
    layout = {}
    for surface, (cx, cy) in clusters.items():
        for i in range(3):
            block = (surface - 1) * 3 + i + 1
            layout[block] = np.array([cx, cy + (i - 1) * 0.10, 0.02])
    return layout


def default_safety_flags() -> dict[str, str]:
    flags = {label: AVOID for label in HUMAN_CAPSULE_LABELS}
    flags["right_forearm"] = ALLOW
    flags["right_hand"] = ALLOW
    flags["table"] = ALLOW
    return flags


@dataclass
class Scenario:
    seed: int = 0
    mode: str = PROACTIVE
    duration_cap: float = 180.0
    dt: float = TICK
    human: HumanModel = field(default_factory=HumanModel)
    surface_blocks: dict[int, tuple[int, ...]] = field(
        default_factory=lambda: {1: (1, 2, 3), 2: (4, 5, 6),
                                 3: (7, 8, 9), 4: (10, 11, 12)})
    block_layout: dict[int, np.ndarray] = field(default_factory=default_block_layout)
    display_position: tuple[float, float, float] = (0.52, 0.0, 0.45)
    container_offset: tuple[float, float, float] = (0.0, 0.26, 0.0)
    insertion_point: tuple[float, float, float] = (0.66, 0.26, 0.45)
    human_station: tuple[float, float] = (1.20, 0.0)
    safety_flags: dict[str, str] = field(default_factory=default_safety_flags)
    safety: SafetyParams = field(default_factory=SafetyParams)
    planner: PlannerParams = field(default_factory=lambda: PlannerParams(
        d_min=0.35, sigma=0.02, kappa=2.0, max_iterations=40))
    hazard: str | None = None  # disturbance script name, see sim.disturbance

    def __post_init__(self):
        if self.mode not in (BASELINE, PROACTIVE, SCRIPTED):
            raise ValueError(f"unknown mode {self.mode!r}")
        blocks = sorted(b for bs in self.surface_blocks.values() for b in bs)
        if blocks != list(range(1, 13)):
            raise ValueError("scenario needs exactly blocks 1..12")
        if set(self.block_layout) != set(range(1, 13)):
            raise ValueError("block layout must cover blocks 1..12")

    # -- derived objects ----------------------------------------------------

    def arm_model(self) -> ArmModel:
        return default_arm_model()

    def task_graph(self) -> TaskGraph:
        return build_task_graph(self.surface_blocks)

    def safety_spec(self) -> SafetySpec:
        return SafetySpec(dict(self.safety_flags))

    def policy_table(self) -> PolicyTable:
        return PolicyTable(dict(self.surface_blocks),
                           default_display_poses(self.display_position))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "duration_cap": self.duration_cap,
            "dt": self.dt,
            "human": asdict(self.human) | {
                "surface_order": list(self.human.surface_order),
                "block_orders": {str(k): list(v)
                                 for k, v in self.human.block_orders.items()},
            },
            "surface_blocks": {str(k): list(v) for k, v in self.surface_blocks.items()},
            "block_layout": {str(k): [float(x) for x in v]
                             for k, v in self.block_layout.items()},
            "display_position": list(self.display_position),
            "container_offset": list(self.container_offset),
            "insertion_point": list(self.insertion_point),
            "human_station": list(self.human_station),
            "safety_flags": dict(self.safety_flags),
            "safety": asdict(self.safety),
            "planner": asdict(self.planner),
            "hazard": self.hazard,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        human = dict(data["human"])
        human["surface_order"] = tuple(human["surface_order"])
        human["block_orders"] = {int(k): tuple(v)
                                 for k, v in human["block_orders"].items()}
        return cls(
            seed=data["seed"],
            mode=data["mode"],
            duration_cap=data["duration_cap"],
            dt=data["dt"],
            human=HumanModel(**human),
            surface_blocks={int(k): tuple(v)
                            for k, v in data["surface_blocks"].items()},
            block_layout={int(k): np.array(v)
                          for k, v in data["block_layout"].items()},
            display_position=tuple(data["display_position"]),
            container_offset=tuple(data["container_offset"]),
            insertion_point=tuple(data["insertion_point"]),
            human_station=tuple(data["human_station"]),
            safety_flags=dict(data["safety_flags"]),
            safety=SafetyParams(**data["safety"]),
            planner=PlannerParams(**data["planner"]),
            hazard=data.get("hazard"),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def with_overrides(self, **kwargs) -> "Scenario":
        return replace(self, **kwargs)
