import numpy as np
import pytest

from coassembly.geometry import Pose, quat_angle
from coassembly.labels import ALL_LABELS, IDLE
from coassembly.policy import (
    ALERT,
    DISPLAY_SURFACE,
    HOLD_CURRENT,
    PolicyTable,
    RobotGoal,
    collaborate,
    default_display_poses,
    goal_pose,
)
from coassembly.task_graph import (
    InsertionEvent,
    ObservationSeq,
    default_task_graph,
    infer_progress,
    valid_next_intentions,
)

SURFACES = {1: (1, 2, 3), 2: (4, 5, 6), 3: (7, 8, 9), 4: (10, 11, 12)}


@pytest.fixture()
def table() -> PolicyTable:
    return PolicyTable(SURFACES, default_display_poses())


def state_after(blocks):
    graph = default_task_graph()
    obs = ObservationSeq([InsertionEvent(b, float(i)) for i, b in enumerate(blocks)])
    return infer_progress(graph, obs)


def test_reach_at_choice_node_displays_matching_surface(table):
    state = state_after([1, 2, 3])  # surface 1 done, nothing active
    goal = collaborate("R_4", state, table)
    assert goal.kind == DISPLAY_SURFACE
    assert goal.surface == 2


def test_idle_always_holds(table):
    for blocks in ([], [1], [1, 2], [1, 2, 3], [4, 5, 6, 1]):
        assert collaborate(IDLE, state_after(blocks), table).kind == HOLD_CURRENT


def test_off_surface_reach_mid_surface_alerts(table):
    state = state_after([1])  # surface 1 active, admissible set is its blocks
    assert collaborate("R_7", state, table).kind == ALERT


def test_reach_within_active_surface_holds(table):
    state = state_after([1])
    # the active surface's own blocks never alert, inserted or not
    for label in ("R_1", "R_2", "R_3"):
        assert collaborate(label, state, table).kind == HOLD_CURRENT


def test_policy_total_and_deterministic(table):
    graph = default_task_graph()
    for node in graph.nodes.values():
        state = graph.state_for(node)
        for label in ALL_LABELS:
            a = collaborate(label, state, table)
            b = collaborate(label, state, table)
            assert a == b
    table.validate_total(levels=[1, 2, 3])


def test_valid_next_intentions_never_alert(table):
    graph = default_task_graph()
    rng = np.random.default_rng(1)
    for node in graph.nodes.values():
        state = graph.state_for(node)
        for label in valid_next_intentions(graph, state):
            assert collaborate(label, state, table).kind != ALERT
    assert rng is not None


def test_goal_pose_hold_and_display_idempotent(table):
    current = Pose([0.3, 0.1, 0.5], [1.0, 0, 0, 0])
    held, alert = goal_pose(RobotGoal(HOLD_CURRENT), current)
    assert held is current and not alert

    g1, _ = goal_pose(table.display_goal(1), current)
    g2, _ = goal_pose(table.display_goal(1), current)
    np.testing.assert_array_equal(g1.position, g2.position)
    np.testing.assert_array_equal(g1.orientation, g2.orientation)


def test_alert_flags_without_moving(table):
    current = Pose([0.3, 0.1, 0.5], [1.0, 0, 0, 0])
    pose, alert = goal_pose(RobotGoal(ALERT), current)
    assert pose is current
    assert alert


def test_display_poses_distinct_and_well_separated():
    poses = default_display_poses()
    assert len(poses) == 4
    for i in range(1, 5):
        for j in range(i + 1, 5):
            angle = quat_angle(poses[i].orientation, poses[j].orientation)
            assert angle >= np.pi / 4 - 1e-12


def test_display_goal_requires_pose():
    with pytest.raises(ValueError, match="display goals"):
        RobotGoal(DISPLAY_SURFACE, surface=1, pose=None)
