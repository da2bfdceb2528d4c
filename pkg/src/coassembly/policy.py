"""Collaboration policy: map (intention, task state) to the robot goal.

Two behaviors, selected by where the task state sits in the graph:

  * between surfaces (choice nodes): a reach toward any block answers with
    displaying that block's surface; idle holds the current task;
  * mid-surface: the robot already presents the active surface, so a reach
    inside its block set holds, a reach anywhere else raises an alert
    (the worker is deviating from the plan), idle holds.

Alert is an event, not a motion: the robot keeps its pose and flags it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, axis_angle_matrix, quat_from_matrix
from .labels import ALL_LABELS, IDLE, block_of
from .task_graph import TaskState

DISPLAY_SURFACE = "display_surface"
HOLD_CURRENT = "hold_current"
ALERT = "alert"


@dataclass(frozen=True)
class RobotGoal:
    kind: str
    surface: int | None = None
    pose: Pose | None = None

    def __post_init__(self):
        if self.kind not in (DISPLAY_SURFACE, HOLD_CURRENT, ALERT):
            raise ValueError(f"unknown goal kind {self.kind!r}")
        if self.kind == DISPLAY_SURFACE:
            if self.surface is None or self.pose is None:
                raise ValueError("display goals need a surface id and pose")


@dataclass
class PolicyTable:
    """Per-surface block sets and the configured display poses."""
    surface_blocks: dict[int, tuple[int, ...]]
    display_poses: dict[int, Pose]

    def __post_init__(self):
        missing = set(self.surface_blocks) - set(self.display_poses)
        if missing:
            raise ValueError(f"surfaces without display poses: {sorted(missing)}")

    def surface_of_block(self, block: int) -> int | None:
        for surface, blocks in self.surface_blocks.items():
            if block in blocks:
                return surface
        return None

    def display_goal(self, surface: int) -> RobotGoal:
        return RobotGoal(DISPLAY_SURFACE, surface, self.display_poses[surface])

    def validate_total(self, levels) -> None:
        """Every (label, level) pair must map to a goal without error."""
        for level in levels:
            probe = TaskState(node_id=-1, level=level,
                              completed=frozenset(),
                              active_surface=None if level >= 3 else
                              next(iter(self.surface_blocks)),
                              depth=0)
            for label in ALL_LABELS:
                collaborate(label, probe, self)


def collaborate(intention: str, state: TaskState, table: PolicyTable) -> RobotGoal:
    """Deterministic policy lookup; total over labels and task states."""
    if intention == IDLE:
        return RobotGoal(HOLD_CURRENT)
    block = block_of(intention)
    if state.is_between_surfaces:
        surface = table.surface_of_block(block)
        if surface is None:
            return RobotGoal(HOLD_CURRENT)
        return table.display_goal(surface)
    if block in table.surface_blocks[state.active_surface]:
        return RobotGoal(HOLD_CURRENT)
    return RobotGoal(ALERT)


def goal_pose(goal: RobotGoal, current_target: Pose) -> tuple[Pose, bool]:
    """End-effector pose target for a goal, plus the alert flag."""
    if goal.kind == DISPLAY_SURFACE:
        return goal.pose, False
    if goal.kind == HOLD_CURRENT:
        return current_target, False
    return current_target, True


def default_display_poses(position=(0.52, 0.0, 0.45)) -> dict[int, Pose]:
    """Four container orientations, a quarter turn apart, at one station.

    The container is a box on the tool flange that tumbles about the tool
    y-axis (horizontal, rotisserie style): each displayed surface pitches
    the previous face away and brings the next lateral face around to
    point +x at the human station.  Pure pitch keeps the arm in its planar
    branch, so surface swaps are smooth wrist-dominated motions.
    """
    y = np.array([0.0, 1.0, 0.0])
    rolls = {1: 0.0, 2: np.pi / 2, 3: np.pi, 4: -np.pi / 2}
    poses = {}
    for surface, roll in rolls.items():
        R = axis_angle_matrix(y, np.pi / 2 + roll)
        poses[surface] = Pose(np.asarray(position, dtype=float), quat_from_matrix(R))
    return poses
