"""Scripted human worker: body capsules and the reach/insert state machine.

The wrist follows point-to-point trapezoidal speed profiles between the
rest pose, the blocks and the container; the rest of the body is posed
around it (two-link arm with a gravity-biased elbow).  All randomness
comes from the rng handed in by the world, so runs replay exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Capsule
from ..scenario import (
    CONSERVATIVE,
    PROACTIVE_POSTURE,
    BASELINE,
    HumanModel,
    Scenario,
)

UPPER_ARM = 0.30
FOREARM = 0.28
HAND = 0.09
GRAB_HOVER = np.array([0.0, 0.0, 0.10])  # wrist hovers above the block

# hazard script names (scenario.hazard)
LEFT_HAND_INCURSION = "left_hand"
EARLY_REACH = "early_reach"


@dataclass
class RobotView:
    """What the human perceives of the robot, one tick old is fine."""
    ee_position: np.ndarray
    displayed_surface: int | None
    settled: bool   # tight: latches the displayed surface
    stable: bool    # loose: the container is still workable for insertion
    moving: bool


@dataclass
class HumanTick:
    capsules: dict[str, Capsule]
    events: list[tuple[str, dict]]
    phase: str
    target_block: int | None
    wrist: np.ndarray


class TrapezoidProfile:
    """Straight-line segment with trapezoidal (or triangular) speed."""

    def __init__(self, start, end, speed, accel, t0):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        self.t0 = t0
        length = float(np.linalg.norm(self.end - self.start))
        self.length = length
        if length < 1e-9:
            self.duration = 0.0
            self._mode = "empty"
            return
        self.dir = (self.end - self.start) / length
        ramp_len = speed * speed / accel
        if length < ramp_len:
            self.peak = float(np.sqrt(length * accel))
            self.t_ramp = self.peak / accel
            self.duration = 2.0 * self.t_ramp
            self._mode = "triangle"
        else:
            self.t_ramp = speed / accel
            self.t_cruise = (length - ramp_len) / speed
            self.duration = 2.0 * self.t_ramp + self.t_cruise
            self.speed = speed
            self._mode = "trapezoid"
        self.accel = accel

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    def position(self, t: float) -> np.ndarray:
        if self._mode == "empty":
            return self.end.copy()
        tau = np.clip(t - self.t0, 0.0, self.duration)
        a = self.accel
        if self._mode == "triangle":
            if tau < self.t_ramp:
                s = 0.5 * a * tau * tau
            else:
                back = self.duration - tau
                s = self.length - 0.5 * a * back * back
        else:
            if tau < self.t_ramp:
                s = 0.5 * a * tau * tau
            elif tau < self.t_ramp + self.t_cruise:
                s = 0.5 * a * self.t_ramp ** 2 + self.speed * (tau - self.t_ramp)
            else:
                back = self.duration - tau
                s = self.length - 0.5 * a * back * back
        return self.start + s * self.dir


def _elbow_position(shoulder, wrist, bias=(0.35, 0.75, -0.56)):
    """Two-link elbow on the bias side of the shoulder-wrist line.

    The default bias wings the elbow outward and slightly down, the way a
    worker holds the arm when placing a part at chest height; it also
    keeps the (avoid-flagged) upper arm out of the robot's work envelope.
    Stretches past full extension rather than failing.
    """
    shoulder = np.asarray(shoulder, dtype=float)
    wrist = np.asarray(wrist, dtype=float)
    d = np.linalg.norm(wrist - shoulder)
    if d < 1e-9:
        return shoulder + np.array([0.0, 0.0, -UPPER_ARM])
    n = (wrist - shoulder) / d
    if d >= UPPER_ARM + FOREARM:
        return shoulder + n * UPPER_ARM
    a_len = (UPPER_ARM ** 2 - FOREARM ** 2 + d * d) / (2 * d)
    h = np.sqrt(max(UPPER_ARM ** 2 - a_len ** 2, 0.0))
    center = shoulder + a_len * n
    bias = np.asarray(bias, dtype=float)
    lateral = bias - (bias @ n) * n
    norm = np.linalg.norm(lateral)
    if norm < 1e-6:
        fallback = np.array([0.0, 0.0, -1.0])
        lateral = fallback - (fallback @ n) * n
        norm = np.linalg.norm(lateral)
    return center + h * lateral / norm


def build_body(station, right_wrist, left_wrist, lean: np.ndarray,
               right_hand_aim=None) -> dict[str, Capsule]:
    """Ten labeled capsules posed around the two wrist positions.

    The right_hand capsule's first endpoint is the wrist itself; the
    intention featurizer relies on that anchor.
    """
    sx, sy = station
    base = np.array([sx, sy, 0.0])
    lean = np.asarray(lean, dtype=float)
    torso_lo = base + np.array([0.0, 0.0, -0.15]) + 0.3 * lean
    torso_hi = base + np.array([0.0, 0.0, 0.42]) + lean
    r_shoulder = base + np.array([-0.02, 0.20, 0.42]) + lean
    l_shoulder = base + np.array([-0.02, -0.20, 0.42]) + lean
    head_lo = base + np.array([0.0, 0.0, 0.52]) + 1.15 * lean
    head_hi = base + np.array([0.0, 0.0, 0.66]) + 1.15 * lean

    right_wrist = np.asarray(right_wrist, dtype=float)
    left_wrist = np.asarray(left_wrist, dtype=float)
    r_elbow = _elbow_position(r_shoulder, right_wrist)
    l_elbow = _elbow_position(l_shoulder, left_wrist, bias=(0.35, -0.75, -0.56))

    def hand_tip(wrist, elbow, aim):
        if aim is not None:
            d = np.asarray(aim, dtype=float) - wrist
            n = np.linalg.norm(d)
            if n > 1e-6:
                return wrist + d / n * HAND
        d = wrist - elbow
        n = np.linalg.norm(d)
        if n < 1e-9:
            return wrist + np.array([0.0, 0.0, -HAND])
        return wrist + d / n * HAND

    return {
        "head": Capsule(head_lo, head_hi, 0.10),
        "neck": Capsule(torso_hi, head_lo, 0.06),
        "torso": Capsule(torso_lo, torso_hi, 0.14),
        "pelvis": Capsule(base + [0.0, -0.10, -0.20], base + [0.0, 0.10, -0.20], 0.13),
        "right_upper_arm": Capsule(r_shoulder, r_elbow, 0.05),
        "right_forearm": Capsule(r_elbow, right_wrist, 0.04),
        "right_hand": Capsule(right_wrist, hand_tip(right_wrist, r_elbow, right_hand_aim), 0.04),
        "left_upper_arm": Capsule(l_shoulder, l_elbow, 0.05),
        "left_forearm": Capsule(l_elbow, left_wrist, 0.04),
        "left_hand": Capsule(left_wrist, hand_tip(left_wrist, l_elbow, None), 0.04),
    }


# ---------------------------------------------------------------------------
# behavior state machine
# ---------------------------------------------------------------------------

DWELL = "dwell"
COMMAND_WAIT = "command_wait"
REACH = "reach"
GRAB = "grab"
CARRY = "carry"
WAIT_DISPLAY = "wait_display"
APPROACH_INSERT = "approach_insert"
INSERT = "insert"
DONE = "done"

# while the container is still turning the worker stages the block here,
# pulled back so the arm stays clear of the robot's swing
STAGING_OFFSET = np.array([0.24, 0.10, 0.07])
# if the display still is not ready after this long, step back to rest
BACKOFF_AFTER = 2.0


class HumanDriver:
    """Advances the scripted worker one tick at a time."""

    def __init__(self, scenario: Scenario, rng: np.random.Generator):
        self.scenario = scenario
        self.model: HumanModel = scenario.human
        self.rng = rng
        self.sequence = self.model.insertion_sequence(scenario.surface_blocks)
        self.index = 0
        self.phase = DWELL
        self.phase_end = 0.5 * self.model.dwell_duration
        self.rest = np.array([scenario.human_station[0] - 0.18, 0.12, 0.18])
        self.wrist = self.rest.copy()
        self.left_rest = np.array([scenario.human_station[0] - 0.02, -0.26, -0.05])
        self.left_wrist = self.left_rest.copy()
        self.profile: TrapezoidProfile | None = None
        self.insert_progress = 0.0
        self.command_sent = False
        self.command_time = 0.0
        self.baseline_wait = 0.0
        self.insertion_jitter = np.zeros(3)
        self.wait_since = 0.0
        # hazard scripting
        self.hazard = scenario.hazard
        self.left_script: TrapezoidProfile | None = None
        self.left_phase = "idle"
        self.left_trigger = 4.0

    # -- helpers -------------------------------------------------------------

    def current_block(self) -> int | None:
        if self.index >= len(self.sequence):
            return None
        return self.sequence[self.index]

    def _surface_of(self, block: int) -> int:
        for s, blocks in self.scenario.surface_blocks.items():
            if block in blocks:
                return s
        raise ValueError(block)

    def _starts_new_surface(self) -> bool:
        if self.index == 0:
            return True
        prev = self.sequence[self.index - 1]
        return self._surface_of(prev) != self._surface_of(self.current_block())

    def _reach_target(self) -> np.ndarray:
        block = self.current_block()
        target = self.scenario.block_layout[block] + GRAB_HOVER
        jitter = self.rng.normal(0.0, self.model.position_noise, 3)
        jitter[2] *= 0.5
        return target + jitter

    def _insertion_target(self) -> np.ndarray:
        self.insertion_jitter = self.rng.normal(0.0, 0.01, 3)
        return np.asarray(self.scenario.insertion_point) + self.insertion_jitter

    def _staging_target(self) -> np.ndarray:
        return np.asarray(self.scenario.insertion_point) + STAGING_OFFSET

    def _display_ready(self, robot: RobotView) -> bool:
        block = self.current_block()
        return (block is not None and robot.stable
                and robot.displayed_surface == self._surface_of(block))

    def _begin_reach(self, t: float, events: list) -> None:
        self.phase = REACH
        self.profile = TrapezoidProfile(self.wrist, self._reach_target(),
                                        self.model.reach_speed,
                                        self.model.reach_accel, t)
        events.append(("reach_start", {"block": self.current_block(),
                                       "surface": self._surface_of(self.current_block())}))

    def _lean_vector(self, robot: RobotView) -> np.ndarray:
        """Posture and hazard lean of the torso/head toward the workspace."""
        lean = np.zeros(3)
        if self.model.posture == PROACTIVE_POSTURE and self.phase in (
                CARRY, WAIT_DISPLAY, APPROACH_INSERT, INSERT):
            lean += np.array([-0.22, 0.0, -0.04])
        if self.hazard == EARLY_REACH and self.phase in (REACH, GRAB) \
                and robot.moving:
            lean += np.array([-0.18, 0.0, -0.02])
        return lean

    def _update_left_hand(self, t: float, robot: RobotView) -> None:
        if self.hazard != LEFT_HAND_INCURSION:
            return
        if self.left_phase == "idle" and t >= self.left_trigger:
            self.left_phase = "approach"
        if self.left_phase == "approach":
            # chase the end effector
            to = robot.ee_position - self.left_wrist
            dist = np.linalg.norm(to)
            step = 0.9 * self.scenario.dt
            if dist < 0.01:
                self.left_phase = "dwell"
                self.left_until = t + 0.8
            else:
                self.left_wrist = self.left_wrist + to / max(dist, step) * step
        elif self.left_phase == "dwell":
            if t >= self.left_until:
                self.left_phase = "retreat"
        elif self.left_phase == "retreat":
            to = self.left_rest - self.left_wrist
            dist = np.linalg.norm(to)
            step = 0.9 * self.scenario.dt
            if dist < 0.02:
                self.left_wrist = self.left_rest.copy()
                self.left_phase = "done"
            else:
                self.left_wrist = self.left_wrist + to / max(dist, step) * step

    # -- one tick ------------------------------------------------------------

    def update(self, t: float, robot: RobotView) -> HumanTick:
        events: list[tuple[str, dict]] = []
        model = self.model
        block = self.current_block()

        if self.phase == DWELL:
            if t >= self.phase_end:
                if block is None:
                    self.phase = DONE
                elif self.scenario.mode == BASELINE and self._starts_new_surface():
                    self.phase = COMMAND_WAIT
                    self.command_sent = False
                    self.command_time = t + model.command_latency
                    self.baseline_wait = float(self.rng.uniform(2.0, 3.0))
                else:
                    self._begin_reach(t, events)

        elif self.phase == COMMAND_WAIT:
            if not self.command_sent and t >= self.command_time:
                surface = self._surface_of(block)
                events.append(("command", {"surface": surface}))
                self.command_sent = True
            if self.command_sent and t >= self.command_time + self.baseline_wait \
                    and robot.settled \
                    and robot.displayed_surface == self._surface_of(block):
                self._begin_reach(t, events)

        elif self.phase == REACH:
            self.wrist = self.profile.position(t)
            if t >= self.profile.t_end:
                self.phase = GRAB
                self.phase_end = t + model.grab_duration

        elif self.phase == GRAB:
            if t >= self.phase_end:
                events.append(("grab_done", {"block": block}))
                self.phase = CARRY
                target = (self._insertion_target() if self._display_ready(robot)
                          else self._staging_target())
                self.profile = TrapezoidProfile(self.wrist, target,
                                                model.reach_speed,
                                                model.reach_accel, t)

        elif self.phase == CARRY:
            self.wrist = self.profile.position(t)
            if t >= self.profile.t_end:
                self.phase = WAIT_DISPLAY
                self.wait_since = t

        elif self.phase == WAIT_DISPLAY:
            near_slot = np.linalg.norm(
                self.wrist - np.asarray(self.scenario.insertion_point)) < 0.06
            near_rest = np.linalg.norm(self.wrist - self.rest) < 0.08
            if self._display_ready(robot):
                if near_slot:
                    self.phase = INSERT
                    self.insert_progress = 0.0
                    events.append(("insert_start", {"block": block}))
                else:
                    self.phase = APPROACH_INSERT
                    self.profile = TrapezoidProfile(self.wrist, self._insertion_target(),
                                                    model.reach_speed,
                                                    model.reach_accel, t)
            elif near_slot and t - self.wait_since > 0.8:
                # container still turning: pull the block back to staging
                self.phase = APPROACH_INSERT
                self.profile = TrapezoidProfile(self.wrist, self._staging_target(),
                                                model.reach_speed,
                                                model.reach_accel, t)
            elif t - self.wait_since > BACKOFF_AFTER and not near_rest \
                    and not near_slot:
                # the swing needs more room than staging gives: step back
                self.phase = APPROACH_INSERT
                self.profile = TrapezoidProfile(self.wrist, self.rest,
                                                model.reach_speed,
                                                model.reach_accel, t)

        elif self.phase == APPROACH_INSERT:
            self.wrist = self.profile.position(t)
            if t >= self.profile.t_end:
                self.phase = WAIT_DISPLAY
                self.wait_since = t

        elif self.phase == INSERT:
            # progress only counts while the surface is actually presented
            if self._display_ready(robot):
                self.insert_progress += self.scenario.dt
            if self.insert_progress >= model.insertion_duration:
                events.append(("insertion", {"block": block,
                                             "surface": self._surface_of(block)}))
                self.index += 1
                self.phase = DWELL
                self.phase_end = t + model.dwell_duration

        self._update_left_hand(t, robot)
        lean = self._lean_vector(robot)

        aim = None
        if self.phase in (REACH, GRAB) and block is not None:
            aim = self.scenario.block_layout[block]
        elif self.phase in (CARRY, WAIT_DISPLAY, APPROACH_INSERT, INSERT):
            aim = np.asarray(self.scenario.insertion_point) + np.array([0.0, 0.0, -0.02])

        capsules = build_body(self.scenario.human_station, self.wrist,
                              self.left_wrist, lean, right_hand_aim=aim)
        return HumanTick(capsules=capsules, events=events, phase=self.phase,
                         target_block=block if self.phase in (REACH, GRAB) else None,
                         wrist=self.wrist.copy())

    @property
    def finished(self) -> bool:
        return self.phase == DONE
