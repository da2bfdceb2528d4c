"""Hierarchical controller: PD tracking safeguarded by safe-set projection.

Every tick the tracker produces a nominal joint acceleration toward the
current waypoint, and the safety layer predicts the next safety-index value
phi under that control.  phi = d_min^2 - D^2 - lambda*Ddot with D the
minimum avoid distance; the system counts as safe while phi <= 0.  If the
one-step prediction leaves the safe set, the control is projected onto the
halfspace {u : phi_next(u) <= target} in closed form, clamped to the
actuation box, and falls back to maximum braking when the clamped point
still violates the constraint.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    ArmModel,
    ClosestPair,
    EnvironmentState,
    SafetySpec,
    fk_segments_batch,
    forward_kinematics,
    min_env_distance,
)
from .planner import Trajectory

WAYPOINT_TOLERANCE = 0.02  # rad, Euclidean over joints


@dataclass(frozen=True)
class SafetyParams:
    d_min: float = 0.35          # m
    lam: float = 0.5             # s, weight on the approach rate
    eta: float = 2.0             # trigger margin / unsafe decay rate, phi units per s
    u_limit: float = 10.0        # rad/s^2 symmetric actuation box
    dt: float = 1.0 / 30.0       # control tick
    kp: float = 25.0             # tracking gains
    kd: float = 10.0
    waypoint_hold_ticks: int = 3  # reference cadence when not yet converged
    lag_limit: float = 0.35       # rad; reference waits if the robot trails this far
    safety_enabled: bool = True

    def __post_init__(self):
        if self.d_min <= 0 or self.lam <= 0 or self.dt <= 0:
            raise ValueError("d_min, lam and dt must be positive")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


@dataclass
class RobotState:
    q: np.ndarray
    qdot: np.ndarray
    waypoint_index: int = 0
    waypoint_ticks: int = 0  # ticks spent on the current reference waypoint

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if not (np.isfinite(self.q).all() and np.isfinite(self.qdot).all()):
            raise ValueError("robot state must be finite")


@dataclass
class ControlOutput:
    u_nominal: np.ndarray
    u_safe: np.ndarray
    safety_triggered: bool
    emergency: bool
    phi: float
    distance: float
    distance_rate: float
    pair: ClosestPair | None = None


# ---------------------------------------------------------------------------
# tracking controller
# ---------------------------------------------------------------------------

def track(reference: np.ndarray, state: RobotState, params: SafetyParams) -> np.ndarray:
    """PD joint acceleration toward the reference, clamped to the box."""
    u = params.kp * (np.asarray(reference, dtype=float) - state.q) \
        - params.kd * state.qdot
    return np.clip(u, -params.u_limit, params.u_limit)


def advance_waypoint(trajectory: Trajectory, state: RobotState,
                     params: SafetyParams) -> tuple[int, int]:
    """Next reference waypoint index and the tick count spent on it.

    Advances when the current waypoint is reached, and otherwise marches
    at the plan's cadence as long as the robot is not trailing badly, so
    tracking moves at planned speed instead of settling on every single
    waypoint.  A safety stop makes the error grow past the lag limit and
    freezes the reference until tracking resumes.
    """
    idx = state.waypoint_index
    ticks = state.waypoint_ticks
    last = trajectory.horizon - 1
    while idx < last and np.linalg.norm(trajectory.waypoints[idx] - state.q) < WAYPOINT_TOLERANCE:
        idx += 1
        ticks = 0
    error = np.linalg.norm(trajectory.waypoints[idx] - state.q)
    if (idx < last and ticks >= params.waypoint_hold_ticks
            and error < params.lag_limit):
        idx += 1
        ticks = 0
    return idx, ticks


# ---------------------------------------------------------------------------
# safety index
# ---------------------------------------------------------------------------

def _pair_geometry(q, model: ArmModel, env: EnvironmentState, spec: SafetySpec):
    robot = forward_kinematics(q, model)
    return min_env_distance(robot, env, spec)


def _point_jacobian(pair: ClosestPair, model: ArmModel, q: np.ndarray,
                    h: float = 1e-6) -> np.ndarray:
    """(3, n) Jacobian of the closest material point, central differences."""
    n = model.link_count
    probes = np.repeat(q[None, :], 2 * n, axis=0)
    for j in range(n):
        probes[2 * j, j] += h
        probes[2 * j + 1, j] -= h
    p0, p1 = fk_segments_batch(probes, model)
    pts = p0[:, pair.robot_index] + pair.s * (p1[:, pair.robot_index]
                                              - p0[:, pair.robot_index])
    return ((pts[0::2] - pts[1::2]) / (2 * h)).T


def _env_point_velocity(pair: ClosestPair, env: EnvironmentState) -> np.ndarray:
    va, vb = env.velocity_of(pair.env_label)
    return (1.0 - pair.t) * np.asarray(va, dtype=float) + pair.t * np.asarray(vb, dtype=float)


def safety_index(state: RobotState, env: EnvironmentState, spec: SafetySpec,
                 params: SafetyParams, model: ArmModel):
    """(phi, D, Ddot, pair); phi = -inf when nothing is flagged avoid."""
    dist, pair = _pair_geometry(state.q, model, env, spec)
    if pair is None:
        return float("-inf"), dist, 0.0, None
    J = _point_jacobian(pair, model, state.q)
    ddot = float(pair.normal @ (J @ state.qdot - _env_point_velocity(pair, env)))
    phi = params.d_min ** 2 - dist ** 2 - params.lam * ddot
    return float(phi), float(dist), ddot, pair


def _shift_env(env: EnvironmentState, dt: float) -> EnvironmentState:
    """Environment advanced by its own endpoint velocities (capsules only)."""
    from .geometry import Capsule
    caps = {}
    for label, c in env.human_capsules.items():
        va, vb = env.velocity_of(label)
        caps[label] = Capsule(c.a + va * dt, c.b + vb * dt, c.radius)
    return EnvironmentState(
        human_capsules=caps, human_velocities=env.human_velocities,
        static_obstacles=env.static_obstacles,
        block_positions=env.block_positions,
        container_pose=env.container_pose,
        timestamp=env.timestamp + dt)


def phi_rate(state: RobotState, u: np.ndarray, env: EnvironmentState,
             spec: SafetySpec, params: SafetyParams, model: ArmModel,
             delta: float = 1e-4) -> float:
    """Full time derivative of phi under control u, by central differences
    of Ddot along the flow: phi_dot = -2 D Ddot - lam * Dddot."""
    phi0, dist, ddot, pair = safety_index(state, env, spec, params, model)
    if pair is None:
        return 0.0
    rates = []
    for sign in (+1.0, -1.0):
        dtau = sign * delta
        q = state.q + state.qdot * dtau
        qdot = state.qdot + np.asarray(u, dtype=float) * dtau
        shifted = _shift_env(env, dtau)
        probe = RobotState(q, qdot, state.waypoint_index)
        _, _, rate, p = safety_index(probe, shifted, spec, params, model)
        if p is None:
            return 0.0
        rates.append(rate)
    dddot = (rates[0] - rates[1]) / (2 * delta)
    return -2.0 * dist * ddot - params.lam * dddot


# ---------------------------------------------------------------------------
# safe-set projection
# ---------------------------------------------------------------------------

def project_to_halfspace(u: np.ndarray, a: np.ndarray, b: float,
                         lo: float, hi: float):
    """Closest point to u in {x : a.x <= b} intersected with the box.

    Returns (x, status) with status in {"inactive", "projected",
    "infeasible"}; x is None when infeasible.  The KKT solution has the
    form x = clip(u - mu*a) with mu >= 0; a.clip(u - mu*a) is piecewise
    linear and nonincreasing in mu, so walking its breakpoints solves the
    projection exactly.  Without box saturation this reduces to the plain
    closed-form halfspace projection.
    """
    u = np.asarray(u, dtype=float)
    a = np.asarray(a, dtype=float)
    if float(a @ u) <= b:
        return u, "inactive"
    norm2 = float(a @ a)
    if norm2 < 1e-16:
        return None, "infeasible"

    # mu where each coordinate saturates at its box face
    with np.errstate(divide="ignore"):
        mu_sat = np.where(a > 0, (u - lo) / np.where(a != 0, a, 1.0),
                          np.where(a < 0, (u - hi) / np.where(a != 0, a, 1.0), np.inf))
    order = np.argsort(mu_sat)
    h = float(a @ u)          # value at mu = 0
    slope = -norm2            # d h / d mu while nothing is saturated
    mu_prev = 0.0
    for idx in order:
        mu_i = mu_sat[idx]
        if not np.isfinite(mu_i):
            break
        h_at = h + slope * (mu_i - mu_prev)
        if h_at <= b:
            break
        h = h_at
        mu_prev = mu_i
        slope += a[idx] ** 2  # coordinate idx pinned to its face from here on
    if slope >= -1e-12 * norm2:
        mu = mu_prev          # h is flat from here; feasibility checked below
    else:
        mu = mu_prev + (b - h) / slope
    x = np.clip(u - mu * a, lo, hi)
    tol = 1e-9 * max(1.0, abs(b))
    if float(a @ x) > b + tol:
        return None, "infeasible"
    return x, "projected"


def project_safe(u: np.ndarray, state: RobotState, env: EnvironmentState,
                 spec: SafetySpec, params: SafetyParams,
                 model: ArmModel) -> ControlOutput:
    """Minimally perturb the nominal control so the predicted phi stays safe.

    One-step linearization: phi_next(u) = phi + dt * (-2 D Ddot
    - lam * (drift + g.u)) with g the closest-pair kinematic Jacobian
    transposed onto the separation normal.  Nominal control passes through
    untouched whenever its prediction is already below -eta*dt.
    """
    u = np.asarray(u, dtype=float)
    phi, dist, ddot, pair = safety_index(state, env, spec, params, model)
    if pair is None:
        return ControlOutput(u, u.copy(), False, False, phi, dist, ddot, None)

    J = _point_jacobian(pair, model, state.q)
    g = J.T @ pair.normal
    base = -2.0 * dist * ddot
    dt = params.dt

    # cheap driftless prediction for the pass-through test
    phi_pred_nominal = phi + dt * (base - params.lam * float(g @ u))
    threshold = -params.eta * dt
    if phi_pred_nominal <= threshold:
        return ControlOutput(u, u.copy(), False, False, phi, dist, ddot, pair)

    # intervention region: include the acceleration-free drift of Ddot
    drift = _ddot_drift(state, env, spec, params, model, pair, ddot)
    # safe side: never leave the safe set; unsafe side: demand an eta-rate
    # exponential decay (feasible under the actuation box where an immediate
    # return to phi <= 0 is not) plus a small absolute floor so tiny
    # excursions cross zero instead of decaying asymptotically
    if phi <= 0:
        target = 0.0
    else:
        target = phi * max(0.0, 1.0 - params.eta * dt) - 0.1 * dt
    # phi + dt*(base - lam*(drift + g.u)) <= target  <=>  a.u <= b
    a = -dt * params.lam * g
    b = target - phi - dt * (base - params.lam * drift)
    u_proj, status = project_to_halfspace(u, a, b, -params.u_limit, params.u_limit)
    if status == "inactive":
        return ControlOutput(u, u.copy(), False, False, phi, dist, ddot, pair)
    if status == "projected":
        return ControlOutput(u, u_proj, True, False, phi, dist, ddot, pair)
    brake = np.clip(-state.qdot / dt, -params.u_limit, params.u_limit)
    return ControlOutput(u, brake, True, True, phi, dist, ddot, pair)


def _ddot_drift(state, env, spec, params, model, pair, ddot0,
                delta: float = 1e-4) -> float:
    """d(Ddot)/dt at zero commanded acceleration, central differences."""
    rates = []
    for sign in (+1.0, -1.0):
        dtau = sign * delta
        probe = RobotState(state.q + state.qdot * dtau, state.qdot,
                           state.waypoint_index)
        _, _, rate, p = safety_index(probe, _shift_env(env, dtau), spec,
                                     params, model)
        if p is None:
            return 0.0
        rates.append(rate)
    return (rates[0] - rates[1]) / (2 * delta)


# ---------------------------------------------------------------------------
# one control tick
# ---------------------------------------------------------------------------

def control_step(state: RobotState, trajectory: Trajectory,
                 env: EnvironmentState, spec: SafetySpec,
                 params: SafetyParams, model: ArmModel
                 ) -> tuple[ControlOutput, RobotState]:
    """track -> project -> integrate (semi-implicit Euler)."""
    idx, ticks = advance_waypoint(trajectory, state, params)
    tracked = RobotState(state.q, state.qdot, idx, ticks)
    u_nom = track(trajectory.waypoints[idx], tracked, params)
    if params.safety_enabled:
        out = project_safe(u_nom, tracked, env, spec, params, model)
    else:
        phi, dist, ddot, pair = safety_index(tracked, env, spec, params, model)
        out = ControlOutput(u_nom, u_nom.copy(), False, False, phi, dist, ddot, pair)

    qdot = tracked.qdot + out.u_safe * params.dt
    q = tracked.q + qdot * params.dt
    clipped = np.clip(q, model.joint_lower, model.joint_upper)
    qdot = np.where(clipped == q, qdot, 0.0)
    return out, RobotState(clipped, qdot, idx, ticks + 1)
