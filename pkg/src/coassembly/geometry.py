"""Capsule geometry, serial-arm forward kinematics, and distance queries.

All positions are meters in a fixed world frame (z up), angles in radians.
Every function here is pure: no shared mutable state, safe for concurrent use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Returned by min_env_distance when nothing in the scene is flagged avoid.
NO_OBSTACLE_DISTANCE = 1e6

_EPS = 1e-12


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a unit axis (Rodrigues)."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion [w, x, y, z] for a rotation matrix."""
    t = np.trace(R)
    if t > 0:
        r = np.sqrt(1.0 + t)
        w = 0.5 * r
        x = (R[2, 1] - R[1, 2]) / (2.0 * r)
        y = (R[0, 2] - R[2, 0]) / (2.0 * r)
        z = (R[1, 0] - R[0, 1]) / (2.0 * r)
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[1 + i] = 0.5 * r
        q[0] = (R[k, j] - R[j, k]) / (2.0 * r)
        q[1 + j] = (R[j, i] + R[i, j]) / (2.0 * r)
        q[1 + k] = (R[k, i] + R[i, k]) / (2.0 * r)
        w, x, y, z = q
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_angle(qa: np.ndarray, qb: np.ndarray) -> float:
    """Rotation angle (rad) taking orientation qa to qb."""
    d = abs(float(np.dot(qa, qb)) / (np.linalg.norm(qa) * np.linalg.norm(qb)))
    return 2.0 * np.arccos(min(1.0, d))


def rotation_error_vector(R_current: np.ndarray, R_target: np.ndarray) -> np.ndarray:
    """Axis-angle vector of R_target @ R_current.T (world frame)."""
    R_err = R_target @ R_current.T
    w = np.array([R_err[2, 1] - R_err[1, 2],
                  R_err[0, 2] - R_err[2, 0],
                  R_err[1, 0] - R_err[0, 1]])
    c = (np.trace(R_err) - 1.0) / 2.0
    c = np.clip(c, -1.0, 1.0)
    angle = np.arccos(c)
    s = np.linalg.norm(w)
    if s < 1e-9:
        if c > 0:
            return np.zeros(3)
        # pi rotation: recover the axis from R + I
        i = int(np.argmax(np.diag(R_err)))
        e = np.zeros(3)
        e[i] = 1.0
        v = R_err[:, i] + e
        return np.pi * v / np.linalg.norm(v)
    return w / s * angle


@dataclass(frozen=True)
class Pose:
    """Rigid pose: position + unit quaternion [w, x, y, z]."""
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        q = np.asarray(self.orientation, dtype=float)
        if q.shape != (4,):
            raise ValueError("orientation must be a quaternion [w,x,y,z]")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion not normalized (|q| = {n})")
        object.__setattr__(self, "orientation", q)

    @property
    def rotation(self) -> np.ndarray:
        return matrix_from_quat(self.orientation)


# ---------------------------------------------------------------------------
# capsules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Capsule:
    """Swept-sphere volume: segment [a, b] inflated by radius."""
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", _vec3(self.a))
        object.__setattr__(self, "b", _vec3(self.b))
        if not (np.isfinite(self.a).all() and np.isfinite(self.b).all()):
            raise ValueError("capsule endpoints must be finite")
        if self.radius < 0:
            raise ValueError("capsule radius must be >= 0")

    def transformed(self, R: np.ndarray, p: np.ndarray) -> "Capsule":
        return Capsule(R @ self.a + p, R @ self.b + p, self.radius)

    def point_at(self, t: float) -> np.ndarray:
        return self.a + t * (self.b - self.a)


def segment_closest_parameters(p0, p1, q0, q1):
    """Closest-point parameters (s, t) and distance between segments.

    Broadcasts over leading dimensions; inputs are (..., 3) arrays. The
    quadratic distance over the (s, t) unit square is minimized by checking
    the interior stationary point plus the four clamped edge minimizers,
    which covers parallel and degenerate (zero-length) segments.
    """
    p0, p1, q0, q1 = (np.asarray(x, dtype=float) for x in (p0, p1, q0, q1))
    u = p1 - p0
    v = q1 - q0
    w0 = p0 - q0
    a = np.sum(u * u, axis=-1)
    b = np.sum(u * v, axis=-1)
    c = np.sum(v * v, axis=-1)
    d = np.sum(u * w0, axis=-1)
    e = np.sum(v * w0, axis=-1)
    denom = a * c - b * b

    a_safe = np.where(a > _EPS, a, 1.0)
    c_safe = np.where(c > _EPS, c, 1.0)
    denom_safe = np.where(denom > _EPS, denom, 1.0)

    def f(s, t):
        w = w0 + s[..., None] * u - t[..., None] * v
        return np.sum(w * w, axis=-1)

    # interior stationary point, only valid where inside the unit square
    s_in = (b * e - c * d) / denom_safe
    t_in = (a * e - b * d) / denom_safe
    inside = (denom > _EPS) & (s_in >= 0) & (s_in <= 1) & (t_in >= 0) & (t_in <= 1)

    cand_s = [
        np.where(inside, s_in, 0.0),
        np.clip(-d / a_safe, 0.0, 1.0),           # t = 0
        np.clip((b - d) / a_safe, 0.0, 1.0),      # t = 1
        np.zeros_like(a),                          # s = 0
        np.ones_like(a),                           # s = 1
    ]
    cand_t = [
        np.where(inside, t_in, 0.0),
        np.zeros_like(a),
        np.ones_like(a),
        np.clip(e / c_safe, 0.0, 1.0),
        np.clip((e + b) / c_safe, 0.0, 1.0),
    ]
    dists = np.stack([np.where(inside | (i > 0), f(s, t), np.inf)
                      for i, (s, t) in enumerate(zip(cand_s, cand_t))])
    k = np.argmin(dists, axis=0)
    s_best = np.choose(k, cand_s)
    t_best = np.choose(k, cand_t)
    d2 = np.take_along_axis(dists, k[None, ...], axis=0)[0]
    return s_best, t_best, np.sqrt(np.maximum(d2, 0.0))


def _signed_distance_matrix(ap0, ap1, ar, bp0, bp1, br):
    """Pairwise signed capsule distances, (N, M) against (M,) capsules.

    Each pair is put into a canonical argument order (lexicographic on
    endpoints and radius) before evaluation, so results are exactly
    symmetric in the two capsules regardless of caller-side roles.
    Returns (signed, s_a, t_b): parameters refer to the a- and b-side axes.
    """
    n, m = ap0.shape[0], bp0.shape[0]
    ka = np.concatenate([ap0, ap1, ar[:, None]], axis=1)
    kb = np.concatenate([bp0, bp1, br[:, None]], axis=1)
    swap = np.zeros((n, m), dtype=bool)
    decided = np.zeros((n, m), dtype=bool)
    for k in range(7):
        less = kb[None, :, k] < ka[:, None, k]
        differ = kb[None, :, k] != ka[:, None, k]
        swap |= less & ~decided
        decided |= differ

    def pick(mask, first, second):
        return np.where(mask[..., None], first, second)

    a0 = np.broadcast_to(ap0[:, None, :], (n, m, 3))
    a1 = np.broadcast_to(ap1[:, None, :], (n, m, 3))
    b0 = np.broadcast_to(bp0[None, :, :], (n, m, 3))
    b1 = np.broadcast_to(bp1[None, :, :], (n, m, 3))
    s, t, dist = segment_closest_parameters(
        pick(swap, b0, a0), pick(swap, b1, a1),
        pick(swap, a0, b0), pick(swap, a1, b1))
    # radius sum first: IEEE addition commutes, sequential subtraction does not
    signed = dist - (ar[:, None] + br[None, :])
    s_a = np.where(swap, t, s)
    t_b = np.where(swap, s, t)
    return signed, s_a, t_b


def capsule_distance(ca: Capsule, cb: Capsule) -> float:
    """Signed surface distance; negative means penetration depth."""
    signed, _, _ = _signed_distance_matrix(
        ca.a[None, :], ca.b[None, :], np.array([ca.radius]),
        cb.a[None, :], cb.b[None, :], np.array([cb.radius]))
    return float(signed[0, 0])


# ---------------------------------------------------------------------------
# arm model and forward kinematics
# ---------------------------------------------------------------------------

@dataclass
class ArmModel:
    """Serial arm: per-joint rotation axis, offset from the parent frame,
    and one collision capsule per link (in that link's frame)."""
    joint_axes: np.ndarray          # (n, 3) unit axes, in parent frame
    link_offsets: np.ndarray        # (n, 3) translation parent -> joint
    link_capsules: list[Capsule]    # one per link, local frame
    joint_lower: np.ndarray         # (n,) rad
    joint_upper: np.ndarray         # (n,) rad
    velocity_limit: np.ndarray      # (n,) rad/s
    accel_limit: np.ndarray         # (n,) rad/s^2
    ee_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_axes = np.asarray(self.joint_axes, dtype=float)
        self.link_offsets = np.asarray(self.link_offsets, dtype=float)
        for name in ("joint_lower", "joint_upper", "velocity_limit", "accel_limit"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.ee_offset = _vec3(self.ee_offset)
        n = self.link_count
        if n < 1:
            raise ValueError("arm needs at least one link")
        if len(self.link_capsules) != n:
            raise ValueError("every link needs exactly one capsule")
        if self.link_offsets.shape != (n, 3):
            raise ValueError("link_offsets shape mismatch")
        if np.any(self.joint_lower >= self.joint_upper):
            raise ValueError("joint limits must satisfy lower < upper")
        norms = np.linalg.norm(self.joint_axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            self.joint_axes = self.joint_axes / norms[:, None]

    @property
    def link_count(self) -> int:
        return self.joint_axes.shape[0]

    def check_joint_vector(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.link_count,):
            raise ValueError(
                f"joint vector has dimension {q.shape}, model expects {self.link_count}")
        return q

    def clip_to_limits(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.joint_lower, self.joint_upper)


def link_transforms(q: np.ndarray, model: ArmModel):
    """World transform (R, p) of every link frame, chained in joint order."""
    q = model.check_joint_vector(q)
    R = np.eye(3)
    p = np.zeros(3)
    out = []
    for i in range(model.link_count):
        p = p + R @ model.link_offsets[i]
        R = R @ axis_angle_matrix(model.joint_axes[i], q[i])
        out.append((R, p.copy()))
    return out

def forward_kinematics(q: np.ndarray, model: ArmModel) -> list[Capsule]:
    """World-frame collision capsules for every link."""
    frames = link_transforms(q, model)
    return [cap.transformed(R, p) for cap, (R, p) in zip(model.link_capsules, frames)]


def fk_segments(q: np.ndarray, model: ArmModel) -> tuple[np.ndarray, np.ndarray]:
    """Capsule axis endpoints as (L, 3) arrays, skipping object construction.

    Same geometry as forward_kinematics; used by hot loops that query
    distances thousands of times per second.
    """
    frames = link_transforms(q, model)
    n = model.link_count
    p0 = np.empty((n, 3))
    p1 = np.empty((n, 3))
    for i, (cap, (R, p)) in enumerate(zip(model.link_capsules, frames)):
        p0[i] = R @ cap.a + p
        p1[i] = R @ cap.b + p
    return p0, p1


def _axis_angle_batch(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """(K, 3, 3) rotations about one fixed axis for a vector of angles."""
    x, y, z = axis
    K_mat = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    aaT = np.outer(axis, axis)
    c = np.cos(angles)[:, None, None]
    s = np.sin(angles)[:, None, None]
    return c * np.eye(3) + s * K_mat + (1.0 - np.cos(angles))[:, None, None] * aaT


def fk_segments_batch(Q: np.ndarray, model: ArmModel
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Capsule axis endpoints for a batch of configurations, (K, L, 3)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    k, n = Q.shape
    if n != model.link_count:
        raise ValueError("joint dimension mismatch")
    R = np.broadcast_to(np.eye(3), (k, 3, 3)).copy()
    p = np.zeros((k, 3))
    p0 = np.empty((k, n, 3))
    p1 = np.empty((k, n, 3))
    for i in range(n):
        p = p + R @ model.link_offsets[i]
        R = R @ _axis_angle_batch(model.joint_axes[i], Q[:, i])
        cap = model.link_capsules[i]
        p0[:, i] = R @ cap.a + p
        p1[:, i] = R @ cap.b + p
    return p0, p1


def link_radii(model: ArmModel) -> np.ndarray:
    return np.array([c.radius for c in model.link_capsules])


def end_effector_pose(q: np.ndarray, model: ArmModel) -> Pose:
    R, p = link_transforms(q, model)[-1]
    return Pose(p + R @ model.ee_offset, quat_from_matrix(R))


def default_arm_model() -> ArmModel:
    """Six-joint desk-scale arm, alternating vertical/twist and pitch axes.

    Link lengths 0.30/0.30/0.25/0.15/0.10/0.10 m, capsule radius 0.05 m.
    These numbers are scenario configuration, not a contract.
    """
    lengths = [0.30, 0.30, 0.25, 0.15, 0.10, 0.10]
    axes = np.array([
        [0, 0, 1],
        [0, 1, 0],
        [0, 0, 1],
        [0, 1, 0],
        [0, 0, 1],
        [0, 1, 0],
    ], dtype=float)
    offsets = np.zeros((6, 3))
    for i in range(1, 6):
        offsets[i] = [0.0, 0.0, lengths[i - 1]]
    capsules = [Capsule([0, 0, 0], [0, 0, L], 0.05) for L in lengths]
    limits = np.array([2.9, 2.9, 3.5, 3.5, 3.5, 3.5])  # generous wrist travel
    return ArmModel(
        joint_axes=axes,
        link_offsets=offsets,
        link_capsules=capsules,
        joint_lower=-limits,
        joint_upper=limits,
        velocity_limit=np.full(6, 2.5),
        accel_limit=np.full(6, 10.0),
        ee_offset=np.array([0.0, 0.0, lengths[-1]]),
    )


# ---------------------------------------------------------------------------
# environment and safety specification
# ---------------------------------------------------------------------------

AVOID = "avoid"
ALLOW = "allow"


@dataclass
class SafetySpec:
    """Per-capsule avoid/allow flags for everything in the environment."""
    flags: dict[str, str]

    def __post_init__(self):
        for label, flag in self.flags.items():
            if flag not in (AVOID, ALLOW):
                raise ValueError(f"flag for {label!r} must be avoid|allow, got {flag!r}")

    def validate_against(self, labels) -> None:
        labels = set(labels)
        missing = labels - self.flags.keys()
        extra = self.flags.keys() - labels
        if missing:
            raise ValueError(f"environment capsules without a safety flag: {sorted(missing)}")
        if extra:
            raise ValueError(f"safety flags for unknown capsules: {sorted(extra)}")

    def is_avoid(self, label: str) -> bool:
        return self.flags[label] == AVOID


@dataclass
class EnvironmentState:
    """Everything the robot must reason about at one instant."""
    human_capsules: dict[str, Capsule]
    human_velocities: dict[str, tuple[np.ndarray, np.ndarray]]
    static_obstacles: dict[str, Capsule] = field(default_factory=dict)
    block_positions: dict[int, np.ndarray] = field(default_factory=dict)
    container_pose: Pose | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        if len(set(self.human_capsules) & set(self.static_obstacles)) > 0:
            raise ValueError("capsule labels must be unique across the environment")
        for label, (va, vb) in self.human_velocities.items():
            if not (np.isfinite(va).all() and np.isfinite(vb).all()):
                raise ValueError(f"non-finite velocity for capsule {label!r}")

    def capsules(self):
        """All labeled environment capsules (human first, then static)."""
        yield from self.human_capsules.items()
        yield from self.static_obstacles.items()

    def velocity_of(self, label: str):
        if label in self.human_velocities:
            return self.human_velocities[label]
        return np.zeros(3), np.zeros(3)


@dataclass(frozen=True)
class ClosestPair:
    """Closest robot-link/environment-capsule pair from min_env_distance."""
    robot_index: int
    env_label: str
    s: float                 # parameter on the robot capsule axis
    t: float                 # parameter on the environment capsule axis
    point_robot: np.ndarray  # on the robot segment axis
    point_env: np.ndarray    # on the environment segment axis
    axis_distance: float     # segment-segment distance (radii not subtracted)
    normal: np.ndarray       # unit vector env -> robot

def min_env_distance(robot: list[Capsule], env: EnvironmentState,
                     spec: SafetySpec) -> tuple[float, ClosestPair | None]:
    """Minimum signed distance from the arm to all avoid-flagged capsules.

    Returns (NO_OBSTACLE_DISTANCE, None) when nothing is flagged avoid.
    """
    spec.validate_against(label for label, _ in env.capsules())
    avoid = [(label, cap) for label, cap in env.capsules() if spec.is_avoid(label)]
    if not avoid:
        return NO_OBSTACLE_DISTANCE, None

    rp0 = np.array([c.a for c in robot])
    rp1 = np.array([c.b for c in robot])
    rr = np.array([c.radius for c in robot])
    ep0 = np.array([c.a for _, c in avoid])
    ep1 = np.array([c.b for _, c in avoid])
    er = np.array([c.radius for _, c in avoid])

    signed, s, t = _signed_distance_matrix(rp0, rp1, rr, ep0, ep1, er)
    i, j = np.unravel_index(np.argmin(signed), signed.shape)

    p_r = rp0[i] + s[i, j] * (rp1[i] - rp0[i])
    p_e = ep0[j] + t[i, j] * (ep1[j] - ep0[j])
    gap = p_r - p_e
    n = np.linalg.norm(gap)
    normal = gap / n if n > 1e-9 else np.array([0.0, 0.0, 1.0])
    pair = ClosestPair(
        robot_index=int(i), env_label=avoid[j][0],
        s=float(s[i, j]), t=float(t[i, j]),
        point_robot=p_r, point_env=p_e,
        axis_distance=float(n), normal=normal,
    )
    return float(signed[i, j]), pair


def robot_point_velocity(pair: ClosestPair, model: ArmModel, q: np.ndarray,
                         qdot: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Velocity of the material point at pair.point_robot for joint rates qdot.

    Central difference of the point's world position along the joint flow;
    the point is fixed in the link frame it belongs to.
    """
    idx = pair.robot_index
    R, p = link_transforms(q, model)[idx]
    local = R.T @ (pair.point_robot - p)

    def world_point(qq):
        Ri, pi = link_transforms(qq, model)[idx]
        return Ri @ local + pi

    qdot = np.asarray(qdot, dtype=float)
    return (world_point(q + eps * qdot) - world_point(q - eps * qdot)) / (2 * eps)


def distance_rate(pair: ClosestPair | None, model: ArmModel, q: np.ndarray,
                  qdot: np.ndarray, env: EnvironmentState) -> float:
    """Time rate of the closest-pair distance; negative means approaching.

    Projects the relative velocity of the two closest material points onto
    the line joining them (valid while the closest pair is unique).
    """
    if pair is None:
        raise ValueError("no avoid-flagged capsule in the scene: distance rate undefined")
    if not np.isfinite(qdot).all():
        raise ValueError("joint velocities must be finite")
    v_robot = robot_point_velocity(pair, model, q, qdot)
    va, vb = env.velocity_of(pair.env_label)
    v_env = (1.0 - pair.t) * np.asarray(va, dtype=float) + pair.t * np.asarray(vb, dtype=float)
    return float(np.dot(pair.normal, v_robot - v_env))
