"""Joint-space trajectory planning under a distance-margin constraint.

The planner freezes the environment at planning time, solves the goal pose
to a joint vector by damped least squares, and runs projected gradient
descent on a smoothness cost over the waypoints.  Start and terminal
waypoints are pinned (start to the current configuration, terminal to the
IK solution), which makes the unconstrained optimum exactly the straight
joint-space interpolation.  After every accepted descent step, waypoints
violating the inflated margin d_min + kappa * sigma are pushed out along
the numerical distance gradient.  Real-time reaction to a moving human is
the safety controller's job, not the planner's.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ArmModel,
    EnvironmentState,
    Pose,
    SafetySpec,
    _signed_distance_matrix,
    end_effector_pose,
    fk_segments,
    fk_segments_batch,
    link_radii,
    rotation_error_vector,
)


class UnreachableGoalError(Exception):
    pass


class InfeasiblePlanError(Exception):
    def __init__(self, message: str, waypoint_index: int):
        super().__init__(message)
        self.waypoint_index = waypoint_index


@dataclass(frozen=True)
class PlannerParams:
    horizon: int = 20            # waypoints, including the pinned endpoints
    dt: float = 0.1              # seconds between waypoints
    smoothness_weight: float = 1.0
    d_min: float = 0.35          # hard clearance floor (m)
    sigma: float = 0.02          # human position noise fed by the scenario
    kappa: float = 2.0           # margin inflation multiplier
    max_iterations: int = 80
    tolerance: float = 1e-5      # convergence on cost change
    projection_max_steps: int = 50

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.d_min <= 0 or self.tolerance <= 0:
            raise ValueError("d_min and tolerance must be positive")

    @property
    def margin(self) -> float:
        return self.d_min + self.kappa * self.sigma


@dataclass
class Trajectory:
    waypoints: np.ndarray        # (n, dof)
    dt: float

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)

    @property
    def horizon(self) -> int:
        return self.waypoints.shape[0]


@dataclass
class PlanResult:
    trajectory: Trajectory
    cost_history: list[float] = field(default_factory=list)
    iterations: int = 0


# ---------------------------------------------------------------------------
# inverse kinematics
# ---------------------------------------------------------------------------

POS_TOL = 1e-3
ROT_TOL = 1e-2


def _pose_error(q, model: ArmModel, target: Pose) -> np.ndarray:
    current = end_effector_pose(q, model)
    e_pos = target.position - current.position
    e_rot = rotation_error_vector(current.rotation, target.rotation)
    return np.concatenate([e_pos, e_rot])


def _clamped_error(e: np.ndarray, pos_cap: float = 0.08,
                   rot_cap: float = 0.30) -> np.ndarray:
    e = e.copy()
    pos_norm = np.linalg.norm(e[:3])
    if pos_norm > pos_cap:
        e[:3] *= pos_cap / pos_norm
    rot_norm = np.linalg.norm(e[3:])
    if rot_norm > rot_cap:
        e[3:] *= rot_cap / rot_norm
    return e


def _dls_solve(target: Pose, model: ArmModel, q_seed, max_iterations: int,
               damping: float, fd_step: float, max_joint_step: float):
    q = model.clip_to_limits(np.asarray(q_seed, dtype=float).copy())
    n = model.link_count
    for _ in range(max_iterations + 1):
        e = _pose_error(q, model, target)
        if np.linalg.norm(e[:3]) < POS_TOL and np.linalg.norm(e[3:]) < ROT_TOL:
            return q
        e = _clamped_error(e)
        J = np.empty((6, n))
        for j in range(n):
            dq = np.zeros(n)
            dq[j] = fd_step
            J[:, j] = (_pose_error(q + dq, model, target)
                       - _pose_error(q - dq, model, target)) / (2 * fd_step)
        # Newton on the error: e(q + dq) ~ e + J dq = 0
        JJt = J @ J.T + damping ** 2 * np.eye(6)
        step = J.T @ np.linalg.solve(JJt, e)
        biggest = np.abs(step).max()
        if biggest > max_joint_step:
            step *= max_joint_step / biggest
        q = model.clip_to_limits(q - step)
    return None


def inverse_kinematics(target: Pose, model: ArmModel, q_seed,
                       max_iterations: int = 200, damping: float = 0.05,
                       fd_step: float = 1e-6, max_joint_step: float = 0.35
                       ) -> np.ndarray:
    """Damped least squares on a numerically differentiated pose error.

    The error fed to each solve is clamped and per-iteration joint steps
    are capped, so distant seeds walk in rather than slamming into joint
    limits.  If the seed's basin fails, a fixed ladder of deterministic
    restart seeds around it is tried before giving up.
    """
    q_seed = np.asarray(q_seed, dtype=float)
    q = _dls_solve(target, model, q_seed, max_iterations, damping,
                   fd_step, max_joint_step)
    if q is not None:
        return q
    rng = np.random.default_rng(12251)
    for scale in (0.3, 0.6, 1.0, 1.0, 1.5, 1.5):
        seed = q_seed + rng.uniform(-scale, scale, model.link_count)
        q = _dls_solve(target, model, seed, max_iterations, damping,
                       fd_step, max_joint_step)
        if q is not None:
            return q
    raise UnreachableGoalError(
        f"inverse kinematics did not converge to {target.position} "
        f"within {max_iterations} iterations")


# ---------------------------------------------------------------------------
# obstacle queries for a frozen environment
# ---------------------------------------------------------------------------

class _FrozenObstacles:
    """Avoid-flagged capsules of one environment snapshot, vectorized."""

    def __init__(self, env: EnvironmentState, spec: SafetySpec):
        spec.validate_against(label for label, _ in env.capsules())
        avoid = [cap for label, cap in env.capsules() if spec.is_avoid(label)]
        self.empty = not avoid
        if not self.empty:
            self.p0 = np.array([c.a for c in avoid])
            self.p1 = np.array([c.b for c in avoid])
            self.r = np.array([c.radius for c in avoid])

    def _batch_clearance(self, p0, p1, rr) -> np.ndarray:
        """Min clearance for stacked configurations, (K*L, 3) inputs."""
        signed, _, _ = _signed_distance_matrix(p0, p1, rr, self.p0, self.p1, self.r)
        return signed.min(axis=1)

    def clearance(self, q, model: ArmModel) -> float:
        if self.empty:
            return np.inf
        p0, p1 = fk_segments(q, model)
        return float(self._batch_clearance(p0, p1, link_radii(model)).min())

    def waypoint_clearances(self, waypoints, model: ArmModel) -> np.ndarray:
        if self.empty:
            return np.full(len(waypoints), np.inf)
        p0, p1 = fk_segments_batch(np.asarray(waypoints), model)
        k = p0.shape[0]
        rr = np.tile(link_radii(model), k)
        per_link = self._batch_clearance(p0.reshape(-1, 3), p1.reshape(-1, 3), rr)
        return per_link.reshape(k, model.link_count).min(axis=1)

    def clearance_gradient(self, q, model: ArmModel, h: float = 1e-5) -> np.ndarray:
        """Central-difference distance gradient, all perturbations batched."""
        n = model.link_count
        probes = []
        for j in range(n):
            dq = np.zeros(n)
            dq[j] = h
            probes.append(q + dq)
            probes.append(q - dq)
        d = self.waypoint_clearances(probes, model)
        return (d[0::2] - d[1::2]) / (2 * h)


# ---------------------------------------------------------------------------
# trajectory optimization
# ---------------------------------------------------------------------------

def _smoothness_cost(W: np.ndarray, weight: float) -> float:
    deltas = np.diff(W, axis=0)
    return float(weight * np.sum(deltas * deltas))


def _smoothness_gradient(W: np.ndarray, weight: float) -> np.ndarray:
    # gradient w.r.t. the interior waypoints only; endpoints are pinned
    g = np.zeros_like(W)
    g[1:-1] = 2.0 * weight * (2.0 * W[1:-1] - W[:-2] - W[2:])
    return g


def _project_waypoint(q, tangent, obstacles: _FrozenObstacles, model: ArmModel,
                      margin: float, max_steps: int):
    """Push one waypoint along the distance gradient until clear.

    The push prefers the gradient component lateral to the path tangent, so
    the detour goes around the obstacle instead of sliding the conflict to
    the neighboring waypoints.
    """
    q = q.copy()
    for _ in range(max_steps):
        d = obstacles.clearance(q, model)
        if d >= margin:
            return q
        g = obstacles.clearance_gradient(q, model)
        if tangent is not None:
            t_norm = np.linalg.norm(tangent)
            if t_norm > 1e-12:
                t = tangent / t_norm
                lateral = g - (g @ t) * t
                if np.linalg.norm(lateral) > 0.25 * np.linalg.norm(g):
                    g = lateral
        norm2 = float(g @ g)
        if norm2 < 1e-12:
            return None
        step = 1.2 * (margin - d) / norm2 * g
        biggest = np.abs(step).max()
        if biggest > 0.4:
            step *= 0.4 / biggest
        q = model.clip_to_limits(q + step)
    d = obstacles.clearance(q, model)
    return q if d >= margin else None


def _project_all(W, obstacles, model, params: PlannerParams) -> np.ndarray:
    clear = obstacles.waypoint_clearances(W, model)
    violating = np.flatnonzero(clear < params.margin)
    if violating.size == 0:
        return W
    if violating[-1] == len(W) - 1:
        raise InfeasiblePlanError(
            "goal configuration violates the inflated distance margin",
            waypoint_index=len(W) - 1)
    for k in violating:
        if k == 0:
            continue  # the start configuration is where the robot already is
        tangent = W[min(k + 1, len(W) - 1)] - W[k - 1]
        pushed = _project_waypoint(W[k], tangent, obstacles, model,
                                   params.margin, params.projection_max_steps)
        if pushed is None:
            raise InfeasiblePlanError(
                f"could not push waypoint {k} beyond the {params.margin:.3f} m margin",
                waypoint_index=int(k))
        W[k] = pushed
    return W


def _velocity_violations(W: np.ndarray, model: ArmModel,
                         params: PlannerParams) -> bool:
    deltas = np.abs(np.diff(W, axis=0))
    return bool(np.any(deltas > model.velocity_limit * params.dt))


def _audit(W: np.ndarray, obstacles, model: ArmModel, params: PlannerParams) -> None:
    lower, upper = model.joint_lower, model.joint_upper
    if np.any(W < lower - 1e-9) or np.any(W > upper + 1e-9):
        raise InfeasiblePlanError("waypoint outside joint limits",
                                  int(np.argmax(np.any((W < lower) | (W > upper), axis=1))))
    deltas = np.abs(np.diff(W, axis=0))
    speed_cap = model.velocity_limit * params.dt
    if np.any(deltas > speed_cap + 1e-9):
        raise InfeasiblePlanError("consecutive waypoints exceed velocity limits",
                                  int(np.argmax(np.any(deltas > speed_cap, axis=1))) + 1)
    clear = obstacles.waypoint_clearances(W, model)
    bad = np.flatnonzero(clear[1:] < params.margin - 1e-6)
    if bad.size:
        raise InfeasiblePlanError("waypoint violates the inflated distance margin",
                                  int(bad[0]) + 1)


def plan(q_start, goal: Pose, env: EnvironmentState, spec: SafetySpec,
         model: ArmModel, params: PlannerParams = PlannerParams(),
         q_goal: np.ndarray | None = None) -> PlanResult:
    """Safe joint trajectory from q_start to the goal pose.

    Deterministic given identical inputs.  Raises UnreachableGoalError when
    IK fails and InfeasiblePlanError when the margin cannot be satisfied.
    Callers that already know the goal configuration pass q_goal and skip
    the IK solve.
    """
    q_start = model.check_joint_vector(np.asarray(q_start, dtype=float))
    if q_goal is None:
        q_goal = inverse_kinematics(goal, model, q_seed=q_start)
    else:
        q_goal = model.check_joint_vector(np.asarray(q_goal, dtype=float))
    obstacles = _FrozenObstacles(env, spec)

    n = params.horizon
    W = np.linspace(q_start, q_goal, n)
    W = _project_all(W, obstacles, model, params)
    cost = _smoothness_cost(W, params.smoothness_weight)
    history = [cost]

    step = 0.1
    iterations = 0
    for _ in range(params.max_iterations):
        iterations += 1
        grad = _smoothness_gradient(W, params.smoothness_weight)
        improved = False
        trial_step = step
        for attempt in range(8):
            W_try = W - trial_step * grad
            W_try[0], W_try[-1] = q_start, q_goal
            W_try = np.clip(W_try, model.joint_lower, model.joint_upper)
            W_try = _project_all(W_try, obstacles, model, params)
            cost_try = _smoothness_cost(W_try, params.smoothness_weight)
            if cost_try <= cost:
                improved = True
                if attempt == 0:
                    trial_step *= 1.5  # first try worked: allow longer steps
                break
            trial_step *= 0.5
        if not improved:
            break
        converged = cost - cost_try < params.tolerance
        W, cost, step = W_try, cost_try, trial_step
        history.append(cost)
        if converged and not _velocity_violations(W, model, params):
            break

    _audit(W, obstacles, model, params)
    return PlanResult(Trajectory(W, params.dt), history, iterations)
