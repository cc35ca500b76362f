"""Kinematics of one differential-drive mobile manipulator and of the rigid
transport formation: state integration, DH forward kinematics, grasp
residuals, bounding circles, and the per-robot wedge planes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# DH rows (d, a, alpha, theta_offset); the last row is the fixed gripper.
DEFAULT_DH = np.array([
    [0.070, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.5 * math.pi, 0.0],
    [0.100, 0.0, -math.pi, 0.0],
    [0.125, 0.0, math.pi, 0.0],
    [0.0, 0.120, -0.5 * math.pi, 0.0],
    [0.0, 0.0, 0.0, 0.0],
])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


def n_joints(dh_table) -> int:
    return len(dh_table) - 1


@dataclass
class Limits:
    """Joint position and control-rate boxes, shared by all robots."""

    q_lower: np.ndarray
    q_upper: np.ndarray
    u_lower: np.ndarray  # (v, omega, qdot...)
    u_upper: np.ndarray

    def __post_init__(self):
        self.q_lower = np.asarray(self.q_lower, dtype=float)
        self.q_upper = np.asarray(self.q_upper, dtype=float)
        self.u_lower = np.asarray(self.u_lower, dtype=float)
        self.u_upper = np.asarray(self.u_upper, dtype=float)
        if np.any(self.q_lower > self.q_upper) or np.any(self.u_lower > self.u_upper):
            raise ValueError("limit lower bounds must not exceed upper bounds")


@dataclass
class MMRState:
    """Base pose (x, y, heading) plus arm joint vector."""

    base: np.ndarray
    arm: np.ndarray

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.arm = np.asarray(self.arm, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.base, self.arm])

    @staticmethod
    def from_vector(v, nj) -> "MMRState":
        v = np.asarray(v, dtype=float)
        return MMRState(v[:3].copy(), v[3:3 + nj].copy())


@dataclass
class ControlInput:
    v: float
    omega: float
    arm_rates: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.v, self.omega], np.asarray(self.arm_rates, dtype=float)])


@dataclass
class FormationConfig:
    """Object pose plus all robot states and grasp geometry.

    ``p`` is the object CoM (3-vector), ``psi`` its yaw; roll and pitch stay
    zero for planar transport.  ``grasp_offsets`` are the end-effector hold
    points in the object frame.
    """

    p: np.ndarray
    psi: float
    robots: list
    grasp_offsets: np.ndarray
    z_h: float = math.inf

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.grasp_offsets = np.asarray(self.grasp_offsets, dtype=float)
        if len(self.robots) != len(self.grasp_offsets):
            raise ValueError("one grasp offset per robot is required")
        if len(self.robots) < 1:
            raise ValueError("at least one robot is required")

    @property
    def n_robots(self) -> int:
        return len(self.robots)

    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.p, [self.psi]] + [r.as_vector() for r in self.robots])

    def with_state_vector(self, vec) -> "FormationConfig":
        vec = np.asarray(vec, dtype=float)
        nj = len(self.robots[0].arm)
        per = 3 + nj
        robots = []
        off = 4
        for _ in range(self.n_robots):
            robots.append(MMRState.from_vector(vec[off:off + per], nj))
            off += per
        return FormationConfig(vec[:3].copy(), float(vec[3]), robots, self.grasp_offsets.copy(), self.z_h)


@dataclass
class BoundingCircles:
    base_centers: np.ndarray  # (n, 2)
    base_radii: np.ndarray
    arm_centers: np.ndarray
    arm_radii: np.ndarray
    obj_center: np.ndarray
    obj_radius: float


def base_derivative(state, u) -> np.ndarray:
    """Nonholonomic rate [v cos(phi), v sin(phi), omega, qdot...] for the
    stacked robot state [x, y, phi, q...] and control [v, omega, qdot...]."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    phi = state[2]
    return np.concatenate([[u[0] * math.cos(phi), u[0] * math.sin(phi), u[1]], u[2:]])


def step_rk4(state, u, T_c: float) -> np.ndarray:
    """Classical RK4 step of the coupled first-order robot kinematics; the arm
    channels have constant derivative so they integrate exactly."""
    if T_c <= 0:
        raise ValueError("time step must be positive")
    state = np.asarray(state, dtype=float)
    k1 = base_derivative(state, u)
    k2 = base_derivative(state + 0.5 * T_c * k1, u)
    k3 = base_derivative(state + 0.5 * T_c * k2, u)
    k4 = base_derivative(state + T_c * k3, u)
    return state + (T_c / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _dh_transform(theta, d, a, alpha):
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array([
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def _base_transform(base_pose):
    x, y, phi = base_pose
    c, s = math.cos(phi), math.sin(phi)
    return np.array([
        [c, -s, 0.0, x],
        [s, c, 0.0, y],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])


def fk_chain(base_pose, q, dh_table):
    """World-frame origins of every link frame (base first) and the final
    rotation matrix.  The last DH row is the fixed gripper (theta = offset)."""
    dh = np.asarray(dh_table, dtype=float)
    q = np.asarray(q, dtype=float)
    if len(q) != len(dh) - 1:
        raise ValueError("arm vector must have one entry per DH row except the gripper")
    T = _base_transform(base_pose)
    origins = [T[:3, 3].copy()]
    thetas = np.concatenate([q + dh[:-1, 3], [dh[-1, 3]]])
    for (d, a, alpha, _), th in zip(dh, thetas):
        T = T @ _dh_transform(th, d, a, alpha)
        origins.append(T[:3, 3].copy())
    return np.asarray(origins), T[:3, :3]


def forward_kinematics(state: MMRState, dh_table=DEFAULT_DH):
    """End-effector world position (3-vector) and yaw (heading of the EE
    x-axis projected to the ground plane)."""
    origins, R = fk_chain(state.base, state.arm, dh_table)
    yaw = math.atan2(R[1, 0], R[0, 0])
    return origins[-1], yaw


def grasp_residual(formation: FormationConfig, robot_index: int, dh_table=DEFAULT_DH) -> np.ndarray:
    """[p_ee - p - Rz(psi) @ offset ; wrap(yaw_ee - psi)]; zero iff the grasp
    constraint holds for this robot."""
    p_ee, yaw = forward_kinematics(formation.robots[robot_index], dh_table)
    c, s = math.cos(formation.psi), math.sin(formation.psi)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pos = p_ee - formation.p - Rz @ formation.grasp_offsets[robot_index]
    return np.concatenate([pos, [wrap_angle(yaw - formation.psi)]])


def arm_chain_indices(dh_table, samples=16, seed=0) -> list[int]:
    """Indices into the fk_chain origins whose planar position is structurally
    distinct (decided by random-configuration sampling); always includes the
    base (0) and the end effector."""
    dh = np.asarray(dh_table, dtype=float)
    nj = len(dh) - 1
    rng = np.random.default_rng(seed)
    qs = rng.uniform(-math.pi, math.pi, size=(samples, nj))
    planar = []
    for q in qs:
        origins, _ = fk_chain(np.zeros(3), q, dh)
        planar.append(origins[:, :2])
    planar = np.asarray(planar)  # (samples, n_pts, 2)
    keep = [0]
    for i in range(1, planar.shape[1]):
        if all(np.max(np.abs(planar[:, i] - planar[:, j])) > 1e-9 for j in keep):
            keep.append(i)
    ee = planar.shape[1] - 1
    if ee not in keep:
        # EE may coincide with an earlier frame; represent it explicitly anyway
        keep.append(ee)
    return keep


def max_planar_reach(dh_table, limits: Limits, grid: int = 9) -> float:
    """Maximum planar distance from base center to any arm chain point over a
    joint-box grid; used to size the formation enclosure radius."""
    dh = np.asarray(dh_table, dtype=float)
    nj = len(dh) - 1
    axes = [np.linspace(limits.q_lower[j], limits.q_upper[j], grid) for j in range(nj)]
    # the first joint rotates about the vertical and cannot change the radius
    axes[0] = np.array([0.0])
    best = 0.0
    for q in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, nj):
        origins, _ = fk_chain(np.zeros(3), q, dh)
        best = max(best, float(np.max(np.hypot(origins[:, 0], origins[:, 1]))))
    return best


def bounding_circles(formation: FormationConfig, dh_table=DEFAULT_DH,
                     base_circumradius: float = 0.15 * math.sqrt(2.0),
                     obj_radius: float = 0.25) -> BoundingCircles:
    """Ground-plane circumscribing circles for every base, every arm, and the
    object.  The arm circle is centered midway between the base center and the
    projected EE and grows to cover every projected chain point."""
    n = formation.n_robots
    base_centers = np.zeros((n, 2))
    arm_centers = np.zeros((n, 2))
    arm_radii = np.zeros(n)
    for i, rob in enumerate(formation.robots):
        origins, _ = fk_chain(rob.base, rob.arm, dh_table)
        pts = origins[:, :2]
        base_centers[i] = pts[0]
        center = 0.5 * (pts[0] + pts[-1])
        arm_centers[i] = center
        arm_radii[i] = float(np.max(np.hypot(*(pts - center).T)))
    return BoundingCircles(
        base_centers=base_centers,
        base_radii=np.full(n, base_circumradius),
        arm_centers=arm_centers,
        arm_radii=arm_radii,
        obj_center=formation.p[:2].copy(),
        obj_radius=obj_radius,
    )


def wedge_boundary_angles(grasp_offsets, psi: float) -> np.ndarray:
    """World-frame angles of the vertical wedge planes, one per robot; plane i
    bisects the grasp directions of robots i-1 and i."""
    offs = np.asarray(grasp_offsets, dtype=float)
    n = len(offs)
    theta = np.arctan2(offs[:, 1], offs[:, 0])
    return psi + theta - math.pi / n


def wedge_planes(formation: FormationConfig):
    """Vertical planes through the object CoM partitioning the plane into one
    angular wedge per robot: robot i must satisfy H_i @ v <= h_i and
    H_{(i+1)%n} @ v >= h_{(i+1)%n}."""
    n = formation.n_robots
    if n < 2:
        raise ValueError("wedge planes need at least 2 robots")
    ang = wedge_boundary_angles(formation.grasp_offsets, formation.psi)
    planes = []
    for a in ang:
        H = np.array([math.sin(a), -math.cos(a)])
        planes.append((H, float(H @ formation.p[:2])))
    return planes


def in_wedge(formation: FormationConfig, robot_index: int, point, tol=0.0) -> bool:
    planes = wedge_planes(formation)
    n = formation.n_robots
    H1, h1 = planes[robot_index]
    H2, h2 = planes[(robot_index + 1) % n]
    p = np.asarray(point, dtype=float)
    return float(H1 @ p) <= h1 + tol and float(H2 @ p) >= h2 - tol


def place_formation(object_xy, psi: float, grasp_offsets, q_nominal,
                    dh_table=DEFAULT_DH, z_h: float = math.inf) -> FormationConfig:
    """Inverse placement: put every EE exactly at its grasp point with the
    given nominal arm configuration, solving for base poses and the consistent
    object height.  The returned formation has zero grasp residuals."""
    offs = np.asarray(grasp_offsets, dtype=float)
    n = len(offs)
    q_nominal = np.asarray(q_nominal, dtype=float)
    if q_nominal.ndim == 1:
        q_nominal = np.tile(q_nominal, (n, 1))
    robots = []
    z_obj = None
    c, s = math.cos(psi), math.sin(psi)
    Rz2 = np.array([[c, -s], [s, c]])
    for i in range(n):
        origins, R = fk_chain(np.zeros(3), q_nominal[i], dh_table)
        ee_local = origins[-1]
        yaw_local = math.atan2(R[1, 0], R[0, 0])
        z_i = ee_local[2] - offs[i, 2]
        if z_obj is None:
            z_obj = z_i
        elif abs(z_i - z_obj) > 1e-9:
            raise ValueError("nominal arm configurations give inconsistent object heights")
        phi = wrap_angle(psi - yaw_local)
        cb, sb = math.cos(phi), math.sin(phi)
        Rb = np.array([[cb, -sb], [sb, cb]])
        g_xy = np.asarray(object_xy, dtype=float) + Rz2 @ offs[i, :2]
        base_xy = g_xy - Rb @ ee_local[:2]
        robots.append(MMRState(np.array([base_xy[0], base_xy[1], phi]), q_nominal[i].copy()))
    p = np.array([object_xy[0], object_xy[1], z_obj])
    return FormationConfig(p, psi, robots, offs, z_h)
