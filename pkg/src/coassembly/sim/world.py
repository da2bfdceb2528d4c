"""Discrete-time world: robot, scripted human, inference and control.

One World instance advances a single scenario at a fixed tick.  Every
source of randomness draws from the one seeded generator, in a fixed
order, so a scenario plus its seed replays bit-identically.  Planner
invocations happen synchronously at goal changes and commit a complete
trajectory atomically; the controller never sees a partial plan.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from ..geometry import (
    Capsule,
    EnvironmentState,
    Pose,
    end_effector_pose,
)
from ..intention import MLPParams, PredictionSmoother, featurize, predict
from ..labels import IDLE, reach_label
from ..planner import (
    InfeasiblePlanError,
    Trajectory,
    UnreachableGoalError,
    inverse_kinematics,
    plan,
)
from ..policy import ALERT, DISPLAY_SURFACE, collaborate
from ..safe_control import RobotState, control_step
from ..scenario import BASELINE, PROACTIVE, SCRIPTED, Scenario
from ..task_graph import InsertionEvent, advance
from .human import GRAB, REACH, HumanDriver, RobotView
from .metrics import MetricsLog

HOME_SEED = np.array([0.0, 0.8, 0.0, 1.1, 0.0, -0.8])
SETTLE_POSITION_TOL = 0.05   # rad, joint-space distance to the final waypoint
SETTLE_SPEED_TOL = 0.25      # rad/s


class SimTimeoutError(Exception):
    def __init__(self, message, log: MetricsLog):
        super().__init__(message)
        self.log = log


def _table_capsule() -> Capsule:
    return Capsule([0.15, 0.0, -0.03], [1.05, 0.0, -0.03], 0.02)


class World:
    def __init__(self, scenario: Scenario, classifier: MLPParams | None = None):
        if scenario.mode == PROACTIVE and classifier is None:
            raise ValueError("proactive mode needs a trained intention model")
        self.scenario = scenario
        self.classifier = classifier
        self.rng = np.random.default_rng(scenario.seed)
        self.model = scenario.arm_model()
        self.graph = scenario.task_graph()
        self.spec = scenario.safety_spec()
        self.table = scenario.policy_table()
        self.human = HumanDriver(scenario, self.rng)
        self.task_state = self.graph.root_state()
        self.available = {b: np.asarray(p, dtype=float).copy()
                          for b, p in scenario.block_layout.items()}

        q_home, self.display_configs = self._solve_configurations()
        self.robot = RobotState(q_home, np.zeros(self.model.link_count))
        self.trajectory = Trajectory(q_home[None, :], scenario.dt)
        self.displayed_surface: int | None = None
        self.goal_surface: int | None = None
        self.settled = True

        self.env_history: deque[EnvironmentState] = deque(maxlen=5)
        self.prev_capsules: dict[str, Capsule] | None = None
        self.smoother = PredictionSmoother()
        self.predicted = IDLE
        self.pending_surface: int | None = None
        self.retry_at_tick = 0
        self.tick_count = 0
        self.clock = 0.0
        self.log = MetricsLog(scenario_name=scenario.human.name,
                              seed=scenario.seed, mode=scenario.mode)

    # -- helpers --------------------------------------------------------------

    def _solve_configurations(self):
        """Home configuration plus one joint solution per display surface.

        Solved once, chained surface to surface, so runtime planning never
        re-runs inverse kinematics from an awkward seed.
        """
        from ..geometry import axis_angle_matrix, quat_from_matrix
        face_forward = quat_from_matrix(
            axis_angle_matrix(np.array([0.0, 1.0, 0.0]), np.pi / 2))
        home_pose = Pose(np.array([0.45, 0.0, 0.52]), face_forward)
        q_home = inverse_kinematics(home_pose, self.model, HOME_SEED)
        configs = {}
        seed = q_home
        for surface in sorted(self.table.display_poses):
            seed = inverse_kinematics(self.table.display_poses[surface],
                                      self.model, seed)
            configs[surface] = seed
        return q_home, configs

    def _robot_view(self) -> RobotView:
        ee = end_effector_pose(self.robot.q, self.model).position
        err = np.linalg.norm(self.trajectory.waypoints[-1] - self.robot.q)
        stable = bool(err < 0.12 and np.linalg.norm(self.robot.qdot) < 0.5
                      and self.robot.waypoint_index == self.trajectory.horizon - 1)
        return RobotView(ee_position=ee,
                         displayed_surface=self.displayed_surface,
                         settled=self.settled,
                         stable=stable,
                         moving=self.goal_surface is not None and not self.settled)

    def _build_env(self, capsules: dict[str, Capsule]) -> EnvironmentState:
        dt = self.scenario.dt
        velocities = {}
        for label, cap in capsules.items():
            if self.prev_capsules is not None and label in self.prev_capsules:
                prev = self.prev_capsules[label]
                velocities[label] = ((cap.a - prev.a) / dt, (cap.b - prev.b) / dt)
            else:
                velocities[label] = (np.zeros(3), np.zeros(3))
        self.prev_capsules = capsules
        ee = end_effector_pose(self.robot.q, self.model)
        box_center = ee.position + ee.rotation @ np.asarray(self.scenario.container_offset)
        return EnvironmentState(
            human_capsules=capsules,
            human_velocities=velocities,
            static_obstacles={"table": _table_capsule()},
            block_positions={b: p.copy() for b, p in self.available.items()},
            container_pose=Pose(box_center, ee.orientation),
            timestamp=self.clock,
        )

    def _set_display_goal(self, surface: int, env: EnvironmentState) -> None:
        if surface == self.goal_surface:
            return  # debounce: re-issued goals are no-ops
        goal = self.table.display_goal(surface)
        self.log.record_event(self.clock, "goal",
                              {"kind": goal.kind, "surface": surface})
        try:
            result = plan(self.robot.q, goal.pose, env, self.spec,
                          self.model, self.scenario.planner,
                          q_goal=self.display_configs[surface])
        except (InfeasiblePlanError, UnreachableGoalError) as exc:
            # the workspace is blocked right now (an arm across the path);
            # remember the goal and retry once the snapshot frees up
            self.log.record_event(self.clock, "plan_failed",
                                  {"surface": surface, "reason": str(exc)})
            self.pending_surface = surface
            self.retry_at_tick = self.tick_count + 10
            return
        self.trajectory = result.trajectory
        self.robot = RobotState(self.robot.q, self.robot.qdot, 0)
        self.goal_surface = surface
        self.displayed_surface = None
        self.settled = False
        self.pending_surface = None
        self.log.record_event(self.clock, "plan",
                              {"surface": surface, "iterations": result.iterations})

    def _ground_truth_label(self, tick) -> str:
        if tick.phase in (REACH, GRAB) and tick.target_block is not None:
            return reach_label(tick.target_block)
        return IDLE

    def _update_intention(self, tick, env: EnvironmentState) -> None:
        mode = self.scenario.mode
        if mode == BASELINE:
            return  # the classifier is never consulted in baseline mode
        if mode == SCRIPTED:
            label = self._ground_truth_label(tick)
            confidence = 1.0
        else:
            x = featurize(list(self.env_history), self.available)
            raw, confidence = predict(self.classifier, x)
            label = self.smoother.update(raw)
        if label != self.predicted:
            self.predicted = label
            self.log.record_event(self.clock, "intention",
                                  {"label": label, "confidence": float(confidence)})
            goal = collaborate(label, self.task_state, self.table)
            if goal.kind == DISPLAY_SURFACE:
                self._set_display_goal(goal.surface, env)
            elif goal.kind == ALERT:
                self.log.record_event(self.clock, "alert", {"label": label})

    def _apply_insertion(self, block: int, surface: int) -> None:
        self.available.pop(block, None)
        self.task_state = advance(self.graph, self.task_state,
                                  InsertionEvent(block, self.clock))
        self.log.record_event(self.clock, "insertion",
                              {"block": block, "surface": surface})
        if self.task_state.is_between_surfaces:
            self.log.record_event(self.clock, "surface_done", {"surface": surface})

    # -- one tick ---------------------------------------------------------------

    def step(self):
        if self.clock >= self.scenario.duration_cap:
            raise SimTimeoutError(
                f"scenario exceeded its {self.scenario.duration_cap} s cap", self.log)

        tick = self.human.update(self.clock, self._robot_view())
        env = self._build_env(tick.capsules)
        self.env_history.append(env)

        for kind, payload in tick.events:
            if kind == "insertion":
                self._apply_insertion(payload["block"], payload["surface"])
            else:
                self.log.record_event(self.clock, kind, payload)
                if kind == "command":
                    self._set_display_goal(payload["surface"], env)

        self._update_intention(tick, env)
        if (self.pending_surface is not None
                and self.pending_surface != self.goal_surface
                and self.tick_count >= self.retry_at_tick):
            self._set_display_goal(self.pending_surface, env)

        out, self.robot = control_step(self.robot, self.trajectory, env,
                                       self.spec, self.scenario.safety, self.model)
        self.log.record_tick(self.clock, self.robot.q, self.robot.qdot,
                             out.u_nominal, out.u_safe, out.distance,
                             out.distance_rate, out.phi,
                             out.safety_triggered, out.emergency)

        at_end = self.robot.waypoint_index == self.trajectory.horizon - 1
        near = np.linalg.norm(self.trajectory.waypoints[-1] - self.robot.q) < SETTLE_POSITION_TOL
        slow = np.linalg.norm(self.robot.qdot) < SETTLE_SPEED_TOL
        self.settled = bool(at_end and near and slow)
        if self.settled and self.goal_surface is not None:
            self.displayed_surface = self.goal_surface

        self.clock += self.scenario.dt
        self.tick_count += 1
        return tick

    @property
    def done(self) -> bool:
        return self.human.finished

    def run(self) -> MetricsLog:
        while not self.done:
            self.step()
        self.log.completed = True
        return self.log


def run_scenario(scenario: Scenario, classifier: MLPParams | None = None) -> MetricsLog:
    """Execute one scenario to completion (or raise SimTimeoutError)."""
    return World(scenario, classifier).run()
