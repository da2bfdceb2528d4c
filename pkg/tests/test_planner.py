import numpy as np
import pytest

from coassembly.geometry import (
    AVOID,
    Capsule,
    EnvironmentState,
    SafetySpec,
    default_arm_model,
    end_effector_pose,
    forward_kinematics,
    rotation_error_vector,
)
from coassembly.planner import (
    InfeasiblePlanError,
    PlannerParams,
    UnreachableGoalError,
    _FrozenObstacles,
    inverse_kinematics,
    plan,
)

MODEL = default_arm_model()
Q_START = np.array([-0.2, 0.6, 0.0, 0.8, 0.0, 0.5])
Q_GOAL = np.array([1.4, 0.6, 0.0, 0.8, 0.0, 0.5])


def empty_env() -> tuple[EnvironmentState, SafetySpec]:
    return EnvironmentState(human_capsules={}, human_velocities={}), SafetySpec({})


def env_with(capsule: Capsule) -> tuple[EnvironmentState, SafetySpec]:
    env = EnvironmentState(human_capsules={"obstacle": capsule}, human_velocities={})
    return env, SafetySpec({"obstacle": AVOID})


# ---------------------------------------------------------------------------
# inverse kinematics
# ---------------------------------------------------------------------------

def test_ik_exact_seed_returns_immediately():
    target = end_effector_pose(Q_START, MODEL)
    q = inverse_kinematics(target, MODEL, Q_START)
    np.testing.assert_array_equal(q, Q_START)


def test_ik_round_trip_near_seed():
    rng = np.random.default_rng(3)
    for _ in range(15):
        q_true = rng.uniform(-1.3, 1.3, 6)
        target = end_effector_pose(q_true, MODEL)
        seed = q_true + rng.uniform(-0.2, 0.2, 6) / np.sqrt(6)
        q = inverse_kinematics(target, MODEL, seed)
        got = end_effector_pose(q, MODEL)
        assert np.linalg.norm(got.position - target.position) < 1e-3
        assert np.linalg.norm(
            rotation_error_vector(got.rotation, target.rotation)) < 1e-2


def test_ik_unreachable_goal_errors():
    from coassembly.geometry import Pose
    target = Pose([2.0, 0.0, 0.0], [1.0, 0, 0, 0])  # beyond total arm length
    with pytest.raises(UnreachableGoalError):
        inverse_kinematics(target, MODEL, Q_START)


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def test_plan_stationary_goal_keeps_configuration():
    env, spec = empty_env()
    goal = end_effector_pose(Q_START, MODEL)
    result = plan(Q_START, goal, env, spec, MODEL)
    for wp in result.trajectory.waypoints:
        np.testing.assert_allclose(wp, Q_START, atol=1e-12)
    assert result.cost_history[-1] == pytest.approx(0.0, abs=1e-15)


def test_plan_without_obstacles_is_straight_interpolation():
    env, spec = empty_env()
    goal = end_effector_pose(Q_GOAL, MODEL)
    result = plan(Q_START, goal, env, spec, MODEL)
    W = result.trajectory.waypoints
    q_end = W[-1]
    straight = np.linspace(Q_START, q_end, len(W))
    assert np.abs(W - straight).max() < 1e-3


def blocking_capsule() -> Capsule:
    # crosses the end-effector arc midway between start and goal yaw
    mid = end_effector_pose((Q_START + Q_GOAL) / 2, MODEL).position
    return Capsule(mid + [0, 0, -0.2], mid + [0, 0, 0.2], 0.06)


def test_plan_clears_blocking_capsule_with_margin():
    env, spec = env_with(blocking_capsule())
    goal = end_effector_pose(Q_GOAL, MODEL)
    params = PlannerParams(d_min=0.20, sigma=0.02, kappa=3.0)
    result = plan(Q_START, goal, env, spec, MODEL, params)
    obstacles = _FrozenObstacles(env, spec)
    clear = obstacles.waypoint_clearances(result.trajectory.waypoints, MODEL)
    assert np.all(clear[1:] >= params.margin - 1e-6)


def test_plan_margin_holds_under_monte_carlo_position_noise():
    env, spec = env_with(blocking_capsule())
    goal = end_effector_pose(Q_GOAL, MODEL)
    params = PlannerParams(d_min=0.20, sigma=0.02, kappa=3.0)
    result = plan(Q_START, goal, env, spec, MODEL, params)
    rng = np.random.default_rng(12345)
    base = env.human_capsules["obstacle"]
    passed = 0
    for _ in range(100):
        shift = rng.normal(0.0, params.sigma, 3)
        moved = Capsule(base.a + shift, base.b + shift, base.radius)
        jittered, jspec = env_with(moved)
        obstacles = _FrozenObstacles(jittered, jspec)
        clear = obstacles.waypoint_clearances(result.trajectory.waypoints, MODEL)
        if np.all(clear[1:] >= params.d_min):
            passed += 1
    assert passed >= 99


def test_plan_cost_nonincreasing_history():
    env, spec = env_with(blocking_capsule())
    goal = end_effector_pose(Q_GOAL, MODEL)
    result = plan(Q_START, goal, env, spec, MODEL,
                  PlannerParams(d_min=0.20, kappa=3.0))
    costs = result.cost_history
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


def test_plan_deterministic():
    env, spec = env_with(blocking_capsule())
    goal = end_effector_pose(Q_GOAL, MODEL)
    r1 = plan(Q_START, goal, env, spec, MODEL, PlannerParams(d_min=0.2, kappa=3.0))
    r2 = plan(Q_START, goal, env, spec, MODEL, PlannerParams(d_min=0.2, kappa=3.0))
    np.testing.assert_array_equal(r1.trajectory.waypoints, r2.trajectory.waypoints)


def test_plan_respects_joint_and_velocity_limits():
    env, spec = env_with(blocking_capsule())
    goal = end_effector_pose(Q_GOAL, MODEL)
    result = plan(Q_START, goal, env, spec, MODEL, PlannerParams(d_min=0.2, kappa=3.0))
    W = result.trajectory.waypoints
    assert np.all(W >= MODEL.joint_lower - 1e-9)
    assert np.all(W <= MODEL.joint_upper + 1e-9)
    deltas = np.abs(np.diff(W, axis=0))
    assert np.all(deltas <= MODEL.velocity_limit * result.trajectory.dt + 1e-9)


def test_plan_infeasible_when_goal_region_blocked():
    # a fat capsule wrapping the goal position cannot be cleared
    goal_pos = end_effector_pose(Q_GOAL, MODEL).position
    env, spec = env_with(Capsule(goal_pos, goal_pos + [0, 0, 0.01], 0.45))
    goal = end_effector_pose(Q_GOAL, MODEL)
    with pytest.raises(InfeasiblePlanError) as exc:
        plan(Q_START, goal, env, spec, MODEL, PlannerParams(d_min=0.3))
    assert exc.value.waypoint_index >= 1
