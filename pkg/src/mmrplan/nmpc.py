"""Receding-horizon NMPC for the rigid transport formation.

Direct multiple shooting: the decision vector stacks formation states for
steps 1..N_h and controls for steps 0..N_h-1.  Equalities are the RK4
dynamics defects and the per-step grasp residuals; inequalities are corridor
containment, dynamic-obstacle separation, self-collision wedges, and a
gripper-projection guard.  Derivatives come from JAX; the NLP is solved by
the sparse SQP in :mod:`mmrplan.sqp`.  A separate numpy evaluation path
re-checks every constraint of returned solutions without trusting the solver.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp as np_logsumexp

import jax

jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

import jax.numpy as jnp
from jax.scipy.special import logsumexp as jnp_logsumexp

from .errors import SolverFailure
from .robot_model import (
    FormationConfig,
    Limits,
    MMRState,
    arm_chain_indices,
    fk_chain,
    place_formation,
    step_rk4,
    wrap_angle,
)
from .sqp import NLPProblem, solve_sqp

NORM_EPS = 1e-6   # norm smoothing; constants are bumped by the same amount
LSE_TAU = 2e-3    # arm-radius soft-max temperature (conservative overbound)
GRIP_FLOOR = 0.1  # lower bound on the EE x-axis ground projection alignment


@dataclass
class PlannerConfig:
    """Horizon timing, weights, and tolerances (defaults follow the reference
    simulation setup)."""

    T_h: float = 9.0
    T_e: float = 3.0
    T_c: float = 0.25
    v_op: float = 0.15
    d_safe: float = 0.05
    d_safe_dyn: float = 0.10
    w_u_pattern: tuple = (0.05, 0.05, 5.0, 0.5, 5.0, 0.5, 5.0)
    w_e: tuple = (0.01, 0.01)
    w_terminal: float = 1e5
    z_h: float = math.inf
    sensing_radius: float = 3.0
    kkt_tol: float = 1e-6
    violation_tol: float = 1e-6
    max_sqp_iter: int = 120
    goal_pos_tol: float = 0.05
    goal_yaw_tol: float = 0.15
    max_wall_cycles: int = 400

    def __post_init__(self):
        if not self.T_e < self.T_h:
            raise ValueError("execution time must be shorter than the horizon")
        n_h = self.T_h / self.T_c
        n_e = self.T_e / self.T_c
        if abs(n_h - round(n_h)) > 1e-9 or abs(n_e - round(n_e)) > 1e-9:
            raise ValueError("T_h and T_e must be integer multiples of T_c")

    @property
    def n_horizon(self) -> int:
        return int(round(self.T_h / self.T_c))

    @property
    def n_exec(self) -> int:
        return int(round(self.T_e / self.T_c))


@dataclass
class FormationModel:
    """Scenario geometry and limits shared by every horizon problem."""

    dh: np.ndarray
    n_robots: int
    limits: Limits
    grasp_offsets: np.ndarray
    base_circumradius: float
    obj_radius: float
    z_range: tuple
    chain: tuple = None

    def __post_init__(self):
        self.dh = np.asarray(self.dh, dtype=float)
        self.grasp_offsets = np.asarray(self.grasp_offsets, dtype=float)
        if self.chain is None:
            self.chain = tuple(arm_chain_indices(self.dh))

    @property
    def nj(self) -> int:
        return len(self.dh) - 1

    @property
    def nx_robot(self) -> int:
        return 3 + self.nj

    @property
    def nx(self) -> int:
        return 4 + self.n_robots * self.nx_robot

    @property
    def nu_robot(self) -> int:
        return 2 + self.nj

    @property
    def nu(self) -> int:
        return self.n_robots * self.nu_robot

    @property
    def wedge_theta(self) -> np.ndarray:
        offs = self.grasp_offsets
        return np.arctan2(offs[:, 1], offs[:, 0])

    def w_u_full(self, pattern) -> np.ndarray:
        pattern = np.asarray(pattern, dtype=float)
        if len(pattern) != self.nu_robot:
            raise ValueError("control weight pattern must cover v, omega and all arm rates")
        return np.tile(pattern, self.n_robots)


@dataclass
class HorizonProblem:
    """One receding-horizon NLP instance (immutable once built)."""

    model: FormationModel
    config: PlannerConfig
    x0: np.ndarray                # (nx,) pinned initial formation state
    ref: np.ndarray               # (N_h + 1, 2) reference window
    corridor_A: np.ndarray        # (N_h, R, 2) per-step rows, zero-padded
    corridor_b: np.ndarray        # (N_h, R)
    obstacles: np.ndarray         # (D, 5): px, py, vx, vy, r
    lam: int = 0                  # reference index of the window start

    @property
    def n_horizon(self) -> int:
        return len(self.ref) - 1


@dataclass
class HorizonSolution:
    states: np.ndarray            # (N_h + 1, nx) including the pinned start
    controls: np.ndarray          # (N_h, nu)
    objective: float
    kkt_residual: float
    max_constraint_violation: float
    solve_time: float
    iterations: int
    status: str
    success: bool
    lam: int = 0


def stage_cost(formation: FormationConfig, u, ref_point, w_u, w_e) -> float:
    """u' W_u u + e' W_e e with e the planar CoM tracking error."""
    u = np.asarray(u, dtype=float)
    e = formation.p[:2] - np.asarray(ref_point, dtype=float)
    w_u = np.asarray(w_u, dtype=float)
    w_e = np.asarray(w_e, dtype=float)
    return float(u @ (w_u * u) + e @ (w_e * e))


def terminal_cost(formation: FormationConfig, ref_point, w_terminal: float) -> float:
    e = formation.p[:2] - np.asarray(ref_point, dtype=float)
    return float(w_terminal * (e @ e))


# ---------------------------------------------------------------------------
# JAX model kernels (per static problem signature)
# ---------------------------------------------------------------------------

_KERNELS = {}


def _rk4_step_jax(x, u, T_c):
    def rate(s):
        phi = s[..., 2]
        return jnp.concatenate([
            jnp.stack([u[..., 0] * jnp.cos(phi), u[..., 0] * jnp.sin(phi), u[..., 1]], axis=-1),
            u[..., 2:],
        ], axis=-1)

    k1 = rate(x)
    k2 = rate(x + 0.5 * T_c * k1)
    k3 = rate(x + 0.5 * T_c * k2)
    k4 = rate(x + T_c * k3)
    return x + (T_c / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _fk_jax(base, q, dh):
    """Origins (n_rows + 1, 3) and final rotation for one robot."""
    x, y, phi = base[0], base[1], base[2]
    c, s = jnp.cos(phi), jnp.sin(phi)
    T = jnp.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]])
    T = T.at[0, 0].set(c).at[0, 1].set(-s).at[0, 3].set(x)
    T = T.at[1, 0].set(s).at[1, 1].set(c).at[1, 3].set(y)
    origins = [T[:3, 3]]
    n_rows = dh.shape[0]
    thetas = jnp.concatenate([q + dh[:-1, 3], dh[-1:, 3]])
    for i in range(n_rows):
        d, a, al = dh[i, 0], dh[i, 1], dh[i, 2]
        th = thetas[i]
        ct, st = jnp.cos(th), jnp.sin(th)
        ca, sa = jnp.cos(al), jnp.sin(al)
        Ti = jnp.array([
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ])
        T = T @ Ti
        origins.append(T[:3, 3])
    return jnp.stack(origins), T[:3, :3]


def _smooth_norm(v):
    return jnp.sqrt(jnp.sum(v * v, axis=-1) + NORM_EPS * NORM_EPS)


def _build_kernels(sig):
    """Jitted per-step constraint blocks for a static problem signature.

    Constraints at step k depend only on (x_{k-1}, x_k, u_{k-1}), so the
    Jacobian is computed per step with narrow forward-mode tangents and
    assembled into a block-sparse matrix.
    """
    n, nj, n_dh, N_h, R, D, chain = sig
    nxr = 3 + nj
    nur = 2 + nj
    nx = 4 + n * nxr
    nu = n * nur
    nz = N_h * (nx + nu)
    chain = list(chain)

    def fk_robots(rob, dh):
        origins, Rm = jax.vmap(lambda rv: _fk_jax(rv[:3], rv[3:], dh))(rob)
        return origins, Rm

    def eq_step(x_prev, x_k, u_k, p):
        rob_prev = x_prev[4:].reshape(n, nxr)
        rob = x_k[4:].reshape(n, nxr)
        u = u_k.reshape(n, nur)
        pred = _rk4_step_jax(rob_prev, u, p["T_c"])
        dyn = (rob - pred).reshape(-1)

        origins, Rm = fk_robots(rob, p["dh"])
        p_ee = origins[:, -1, :]
        psi = x_k[3]
        cpsi, spsi = jnp.cos(psi), jnp.sin(psi)
        offs = p["offsets"]
        gx = x_k[0] + offs[:, 0] * cpsi - offs[:, 1] * spsi
        gy = x_k[1] + offs[:, 0] * spsi + offs[:, 1] * cpsi
        gz = x_k[2] + offs[:, 2]
        pos_res = jnp.stack([p_ee[:, 0] - gx, p_ee[:, 1] - gy, p_ee[:, 2] - gz], axis=-1)
        ux, uy = Rm[:, 0, 0], Rm[:, 1, 0]
        e1 = ux * cpsi + uy * spsi
        e2 = uy * cpsi - ux * spsi
        yaw_res = jnp.arctan2(e2, e1)
        return jnp.concatenate([dyn, jnp.concatenate([pos_res, yaw_res[:, None]], axis=-1).reshape(-1)])

    def ineq_step(x_k, kf, A_k, b_k, p):
        rob = x_k[4:].reshape(n, nxr)
        origins, Rm = fk_robots(rob, p["dh"])
        planar = origins[:, chain, :2]
        base_c = rob[:, :2]
        ee_c = origins[:, -1, :2]
        arm_c = 0.5 * (base_c + ee_c)
        dists = _smooth_norm(planar - arm_c[:, None, :])
        r_arm = jnp_logsumexp(dists / LSE_TAU, axis=-1) * LSE_TAU

        d_safe = p["d_safe"]
        rows = []
        for i in range(n):
            rows.append(A_k @ base_c[i] - b_k + d_safe + p["r_base"])
            rows.append(A_k @ arm_c[i] - b_k + d_safe + r_arm[i])
        rows.append(A_k @ x_k[:2] - b_k + d_safe + p["r_obj"])

        if D:
            pos = p["obs"][:, :2] + p["obs"][:, 2:4] * (kf * p["T_c"])
            r_dyn = p["obs"][:, 4]
            margin = p["d_safe_dyn"] + NORM_EPS
            for i in range(n):
                rows.append(r_dyn + p["r_base"] + margin - _smooth_norm(pos - base_c[i]))
                rows.append(r_dyn + r_arm[i] + margin - _smooth_norm(pos - arm_c[i]))
            rows.append(r_dyn + p["r_obj"] + margin - _smooth_norm(pos - x_k[:2]))

        psi = x_k[3]
        ang = psi + p["wedge_theta"] - math.pi / n
        H = jnp.stack([jnp.sin(ang), -jnp.cos(ang)], axis=-1)  # (n, 2)
        pxy = x_k[:2]
        for i in range(n):
            j = (i + 1) % n
            for c in (base_c[i], arm_c[i]):
                rel = c - pxy
                rows.append(jnp.stack([H[i] @ rel, -(H[j] @ rel)]))

        ux, uy = Rm[:, 0, 0], Rm[:, 1, 0]
        e1 = ux * jnp.cos(psi) + uy * jnp.sin(psi)
        rows.append(GRIP_FLOOR - e1)
        return jnp.concatenate([jnp.atleast_1d(r) for r in rows])

    def stack_prev(z, p):
        X = z[:N_h * nx].reshape(N_h, nx)
        U = z[N_h * nx:].reshape(N_h, nu)
        x_prev = jnp.concatenate([p["x0"][None, :], X[:-1]], axis=0)
        return X, U, x_prev

    ks = jnp.arange(1, N_h + 1, dtype=jnp.float64)

    @jax.jit
    def eq_fun(z, p):
        X, U, x_prev = stack_prev(z, p)
        vals = jax.vmap(eq_step, in_axes=(0, 0, 0, None))(x_prev, X, U, p)
        return vals.reshape(-1)

    @jax.jit
    def ineq_fun(z, p):
        X, _, _ = stack_prev(z, p)
        vals = jax.vmap(ineq_step, in_axes=(0, 0, 0, 0, None))(X, ks, p["A"], p["b"], p)
        return vals.reshape(-1)

    eq_jac_step = jax.vmap(jax.jacfwd(eq_step, argnums=(0, 1, 2)), in_axes=(0, 0, 0, None))
    ineq_jac_step = jax.vmap(jax.jacfwd(ineq_step, argnums=0), in_axes=(0, 0, 0, 0, None))

    @jax.jit
    def eq_blocks(z, p):
        X, U, x_prev = stack_prev(z, p)
        return eq_jac_step(x_prev, X, U, p)

    @jax.jit
    def ineq_blocks(z, p):
        X, _, _ = stack_prev(z, p)
        return ineq_jac_step(X, ks, p["A"], p["b"], p)

    me_step = n * nxr + 4 * n
    mi_step = R * (2 * n + 1) + D * (2 * n + 1) + 4 * n + n

    # pre-computed COO index patterns for the block-sparse Jacobians
    def _pattern(rows_per_step, cols_per_step, row_of_step, col_of_step, steps):
        rr, cc = [], []
        br, bc = np.meshgrid(np.arange(rows_per_step), np.arange(cols_per_step), indexing="ij")
        for k in steps:
            rr.append((row_of_step(k) + br).ravel())
            cc.append((col_of_step(k) + bc).ravel())
        if not rr:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        return np.concatenate(rr), np.concatenate(cc)

    # 0-based step index k corresponds to states x_{k+1} (column k * nx),
    # x_k (column (k-1) * nx, absent for k = 0) and controls u_k
    eq_rx, eq_cx = _pattern(me_step, nx, lambda k: k * me_step, lambda k: k * nx, range(N_h))
    eq_rp, eq_cp = _pattern(me_step, nx, lambda k: k * me_step, lambda k: (k - 1) * nx, range(1, N_h))
    eq_ru, eq_cu = _pattern(me_step, nu, lambda k: k * me_step, lambda k: N_h * nx + k * nu, range(N_h))
    in_rx, in_cx = _pattern(mi_step, nx, lambda k: k * mi_step, lambda k: k * nx, range(N_h))

    def assemble_eq(z, p):
        Jp, Jx, Ju = eq_blocks(z, p)
        data = np.concatenate([
            np.asarray(Jx).ravel(),
            np.asarray(Jp)[1:].ravel(),
            np.asarray(Ju).ravel(),
        ])
        rows = np.concatenate([eq_rx, eq_rp, eq_ru])
        cols = np.concatenate([eq_cx, eq_cp, eq_cu])
        return sp.coo_matrix((data, (rows, cols)), shape=(N_h * me_step, nz)).tocsr()

    def assemble_ineq(z, p):
        Jx = ineq_blocks(z, p)
        return sp.coo_matrix((np.asarray(Jx).ravel(), (in_rx, in_cx)),
                             shape=(N_h * mi_step, nz)).tocsr()

    def warmup(params):
        z = jnp.zeros(nz)
        for f in (eq_fun, ineq_fun, eq_blocks, ineq_blocks):
            jax.block_until_ready(f(z, params))

    return {"eq": eq_fun, "ineq": ineq_fun, "eq_jac": assemble_eq,
            "ineq_jac": assemble_ineq, "warmup": warmup, "nz": nz}


def _kernels_for(problem: HorizonProblem):
    m = problem.model
    sig = (m.n_robots, m.nj, len(m.dh), problem.n_horizon,
           problem.corridor_A.shape[1], len(problem.obstacles), tuple(m.chain))
    if sig not in _KERNELS:
        _KERNELS[sig] = _build_kernels(sig)
    return _KERNELS[sig]


def _params_dict(problem: HorizonProblem):
    m = problem.model
    return {
        "x0": jnp.asarray(problem.x0),
        "dh": jnp.asarray(m.dh),
        "offsets": jnp.asarray(m.grasp_offsets),
        "A": jnp.asarray(problem.corridor_A),
        "b": jnp.asarray(problem.corridor_b),
        "obs": jnp.asarray(problem.obstacles.reshape(-1, 5)),
        "wedge_theta": jnp.asarray(m.wedge_theta),
        "r_base": m.base_circumradius,
        "r_obj": m.obj_radius,
        "d_safe": problem.config.d_safe,
        "d_safe_dyn": problem.config.d_safe_dyn,
        "T_c": problem.config.T_c,
    }


# ---------------------------------------------------------------------------
# Independent numpy evaluation (audit path; never calls into JAX)
# ---------------------------------------------------------------------------

def _np_arm_geometry(model: FormationModel, rob_state):
    origins, R = fk_chain(rob_state[:3], rob_state[3:], model.dh)
    planar = origins[list(model.chain), :2]
    base_c = origins[0, :2]
    ee_c = origins[-1, :2]
    arm_c = 0.5 * (base_c + ee_c)
    d = np.sqrt(np.sum((planar - arm_c) ** 2, axis=-1) + NORM_EPS ** 2)
    r_arm = float(np_logsumexp(d / LSE_TAU) * LSE_TAU)
    return origins, R, base_c, arm_c, r_arm


def evaluate_constraints(problem: HorizonProblem, states, controls) -> dict:
    """Re-evaluate every constraint group with plain numpy.

    ``states`` includes the pinned initial state at index 0.  Returns signed
    values with the conventions equalities = 0 and inequalities <= 0, plus box
    violations, grouped by name.
    """
    m = problem.model
    cfg = problem.config
    N_h = problem.n_horizon
    n, nj = m.n_robots, m.nj
    nxr, nur = m.nx_robot, m.nu_robot
    out = {}

    dyn = np.zeros((N_h, n, nxr))
    grasp = np.zeros((N_h, n, 4))
    corridor = []
    dynamic = []
    wedge = []
    grip = []
    for k in range(1, N_h + 1):
        xk = states[k]
        obj = xk[:4]
        A = problem.corridor_A[k - 1]
        b = problem.corridor_b[k - 1]
        psi = obj[3]
        ang = psi + m.wedge_theta - math.pi / n
        H = np.stack([np.sin(ang), -np.cos(ang)], axis=-1)
        for i in range(n):
            rv = xk[4 + i * nxr:4 + (i + 1) * nxr]
            rv_prev = states[k - 1][4 + i * nxr:4 + (i + 1) * nxr]
            u = controls[k - 1][i * nur:(i + 1) * nur]
            dyn[k - 1, i] = rv - step_rk4(rv_prev, u, cfg.T_c)

            origins, R, base_c, arm_c, r_arm = _np_arm_geometry(m, rv)
            p_ee = origins[-1]
            c, s = math.cos(psi), math.sin(psi)
            Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            grasp[k - 1, i, :3] = p_ee - obj[:3] - Rz @ m.grasp_offsets[i]
            ux, uy = R[0, 0], R[1, 0]
            e1 = ux * c + uy * s
            e2 = uy * c - ux * s
            grasp[k - 1, i, 3] = math.atan2(e2, e1)

            corridor.append(A @ base_c - b + cfg.d_safe + m.base_circumradius)
            corridor.append(A @ arm_c - b + cfg.d_safe + r_arm)
            for d_obs in problem.obstacles.reshape(-1, 5):
                pos = d_obs[:2] + d_obs[2:4] * (k * cfg.T_c)
                margin = cfg.d_safe_dyn + NORM_EPS
                sep_b = math.sqrt(np.sum((pos - base_c) ** 2) + NORM_EPS ** 2)
                sep_a = math.sqrt(np.sum((pos - arm_c) ** 2) + NORM_EPS ** 2)
                dynamic.append(d_obs[4] + m.base_circumradius + margin - sep_b)
                dynamic.append(d_obs[4] + r_arm + margin - sep_a)
            j = (i + 1) % n
            for cc in (base_c, arm_c):
                rel = cc - obj[:2]
                wedge.append(float(H[i] @ rel))
                wedge.append(float(-(H[j] @ rel)))
            grip.append(GRIP_FLOOR - e1)
        corridor.append(A @ obj[:2] - b + cfg.d_safe + m.obj_radius)
        for d_obs in problem.obstacles.reshape(-1, 5):
            pos = d_obs[:2] + d_obs[2:4] * (k * cfg.T_c)
            sep = math.sqrt(np.sum((pos - obj[:2]) ** 2) + NORM_EPS ** 2)
            dynamic.append(d_obs[4] + m.obj_radius + cfg.d_safe_dyn + NORM_EPS - sep)

    out["dynamics"] = dyn
    out["grasp"] = grasp
    out["corridor"] = np.concatenate(corridor) if corridor else np.zeros(0)
    out["dynamic"] = np.asarray(dynamic)
    out["wedge"] = np.asarray(wedge)
    out["grip"] = np.asarray(grip)

    # box constraints on arm joints, object height, and controls
    lo_q, hi_q = m.limits.q_lower, m.limits.q_upper
    box = []
    for k in range(1, N_h + 1):
        xk = states[k]
        box.append(max(xk[2] * 0.0, float(problem.model.z_range[0] - xk[2])))
        box.append(float(xk[2] - problem.model.z_range[1]))
        for i in range(n):
            q = xk[4 + i * nxr + 3:4 + (i + 1) * nxr]
            box.append(float(np.max(lo_q - q)))
            box.append(float(np.max(q - hi_q)))
    for k in range(N_h):
        for i in range(n):
            u = controls[k][i * nur:(i + 1) * nur]
            box.append(float(np.max(m.limits.u_lower - u)))
            box.append(float(np.max(u - m.limits.u_upper)))
    out["box"] = np.asarray(box)
    return out


def max_violation(groups: dict) -> float:
    v = 0.0
    v = max(v, float(np.max(np.abs(groups["dynamics"]))) if groups["dynamics"].size else 0.0)
    v = max(v, float(np.max(np.abs(groups["grasp"]))) if groups["grasp"].size else 0.0)
    for key in ("corridor", "dynamic", "wedge", "grip", "box"):
        if groups[key].size:
            v = max(v, float(np.max(groups[key])))
    return v


def count_constraint_rows(problem: HorizonProblem) -> dict:
    """Structural row counts of the assembled constraint set."""
    m = problem.model
    N_h = problem.n_horizon
    n = m.n_robots
    R = problem.corridor_A.shape[1]
    D = len(problem.obstacles.reshape(-1, 5))
    return {
        "dynamics": N_h * n * m.nx_robot,
        "grasp": N_h * n * 4,
        "corridor": N_h * R * (2 * n + 1),
        "dynamic": N_h * D * (2 * n + 1),
        "wedge": N_h * n * 4,
        "grip": N_h * n,
    }


# ---------------------------------------------------------------------------
# Problem assembly and solve
# ---------------------------------------------------------------------------

def build_horizon_problem(model: FormationModel, config: PlannerConfig,
                          initial: FormationConfig, ref_points, ref_corridor,
                          corridors, lam: int, obstacles) -> HorizonProblem:
    """Assemble the NLP data for one horizon starting at reference index
    ``lam``; the per-step corridor is the one assigned to the step's
    reference point."""
    N_h = config.n_horizon
    K = len(ref_points)
    idx = np.minimum(lam + np.arange(N_h + 1), K - 1)
    ref = np.asarray(ref_points)[idx]
    R_max = max(len(c.b) for c in corridors)
    corridor_A = np.zeros((N_h, R_max, 2))
    corridor_b = np.full((N_h, R_max), 1e6)
    for k in range(1, N_h + 1):
        region = corridors[int(ref_corridor[idx[k]])]
        rows = len(region.b)
        corridor_A[k - 1, :rows] = region.A
        corridor_b[k - 1, :rows] = region.b
    obstacles = np.asarray(obstacles, dtype=float).reshape(-1, 5)
    return HorizonProblem(
        model=model, config=config, x0=initial.state_vector(), ref=ref,
        corridor_A=corridor_A, corridor_b=corridor_b, obstacles=obstacles, lam=lam,
    )


def _bounds(problem: HorizonProblem):
    m = problem.model
    N_h = problem.n_horizon
    lb_x = np.full(m.nx, -np.inf)
    ub_x = np.full(m.nx, np.inf)
    lb_x[2], ub_x[2] = problem.model.z_range
    for i in range(m.n_robots):
        off = 4 + i * m.nx_robot + 3
        lb_x[off:off + m.nj] = m.limits.q_lower
        ub_x[off:off + m.nj] = m.limits.q_upper
    lb_u = np.tile(m.limits.u_lower, m.n_robots)
    ub_u = np.tile(m.limits.u_upper, m.n_robots)
    lb = np.concatenate([np.tile(lb_x, N_h), np.tile(lb_u, N_h)])
    ub = np.concatenate([np.tile(ub_x, N_h), np.tile(ub_u, N_h)])
    return lb, ub


def _cost_pieces(problem: HorizonProblem):
    m = problem.model
    cfg = problem.config
    N_h = problem.n_horizon
    w_u = m.w_u_full(cfg.w_u_pattern)
    w_e = np.asarray(cfg.w_e, dtype=float)
    nx, nu = m.nx, m.nu

    diag = np.zeros(N_h * (nx + nu))
    for k in range(1, N_h):
        diag[(k - 1) * nx:(k - 1) * nx + 2] = 2.0 * w_e
    diag[(N_h - 1) * nx:(N_h - 1) * nx + 2] = 2.0 * cfg.w_terminal
    diag[N_h * nx:] = np.tile(2.0 * w_u, N_h)
    H = sp.diags(diag + 1e-8, format="csc")

    ref = problem.ref

    def objective(z):
        X = z[:N_h * nx].reshape(N_h, nx)
        U = z[N_h * nx:].reshape(N_h, nu)
        e0 = problem.x0[:2] - ref[0]
        e = X[:-1, :2] - ref[1:N_h]
        eN = X[-1, :2] - ref[N_h]
        f = float(e0 @ (w_e * e0))
        f += float(np.sum((e * e) @ w_e))
        f += cfg.w_terminal * float(eN @ eN)
        f += float(np.sum((U * U) @ w_u))
        g = np.zeros_like(z)
        gx = np.zeros((N_h, nx))
        gx[:N_h - 1, :2] = 2.0 * w_e * e
        gx[N_h - 1, :2] = 2.0 * cfg.w_terminal * eN
        g[:N_h * nx] = gx.reshape(-1)
        g[N_h * nx:] = (2.0 * w_u * U).reshape(-1)
        return f, g

    return objective, H


def initial_guess(problem: HorizonProblem) -> np.ndarray:
    """Roll the formation along the reference window by inverse placement,
    with controls from finite differences; arms stay at their current
    configuration."""
    m = problem.model
    cfg = problem.config
    N_h = problem.n_horizon
    x0 = problem.x0
    initial = FormationConfig(
        x0[:3].copy(), float(x0[3]),
        [MMRState.from_vector(x0[4 + i * m.nx_robot:4 + (i + 1) * m.nx_robot], m.nj)
         for i in range(m.n_robots)],
        m.grasp_offsets,
    )
    ref = problem.ref
    # unwrapped heading of the reference window, reused where segments vanish
    psi = np.zeros(N_h + 1)
    psi[0] = initial.psi
    for k in range(1, N_h + 1):
        d = ref[k] - ref[k - 1]
        if np.hypot(*d) <= 1e-9:
            psi[k] = psi[k - 1]
        else:
            raw = math.atan2(d[1], d[0])
            psi[k] = psi[k - 1] + wrap_angle(raw - psi[k - 1])
    q_nom = np.stack([r.arm for r in initial.robots])
    states = np.zeros((N_h + 1, m.nx))
    states[0] = x0
    prev = initial
    controls = np.zeros((N_h, m.nu))
    for k in range(1, N_h + 1):
        f = place_formation(ref[k], psi[k], m.grasp_offsets, q_nom, m.dh)
        # keep the pinned object height (placement recomputes the same value)
        states[k] = f.state_vector()
        for i in range(m.n_robots):
            b_now = prev.robots[i].base
            b_nxt = f.robots[i].base
            dp = b_nxt[:2] - b_now[:2]
            head = np.array([math.cos(b_now[2]), math.sin(b_now[2])])
            v = float(dp @ head) / cfg.T_c
            w = wrap_angle(b_nxt[2] - b_now[2]) / cfg.T_c
            u = np.zeros(m.nu_robot)
            u[0] = np.clip(v, m.limits.u_lower[0], m.limits.u_upper[0])
            u[1] = np.clip(w, m.limits.u_lower[1], m.limits.u_upper[1])
            controls[k - 1, i * m.nu_robot:(i + 1) * m.nu_robot] = u
        prev = f
    return np.concatenate([states[1:].reshape(-1), controls.reshape(-1)])


def shift_warm_start(problem: HorizonProblem, sol: HorizonSolution, n_shift: int) -> np.ndarray:
    """Shift a previous solution by the executed steps and pad the tail."""
    m = problem.model
    N_h = problem.n_horizon
    states = np.vstack([sol.states[n_shift + 1:], np.tile(sol.states[-1], (n_shift, 1))])
    controls = np.vstack([sol.controls[n_shift:], np.zeros((n_shift, m.nu))])
    return np.concatenate([states.reshape(-1), controls.reshape(-1)])


def solve_horizon(problem: HorizonProblem, warm_start=None) -> HorizonSolution:
    """Solve one horizon NLP; deterministic for identical inputs.

    Raises SolverFailure when the iterate cannot reach feasibility within the
    violation tolerance.
    """
    t_start = time.perf_counter()
    m = problem.model
    cfg = problem.config
    N_h = problem.n_horizon
    kern = _kernels_for(problem)
    params = _params_dict(problem)
    objective, H = _cost_pieces(problem)
    lb, ub = _bounds(problem)

    def constraints(z):
        zj = jnp.asarray(z)
        return np.asarray(kern["eq"](zj, params)), np.asarray(kern["ineq"](zj, params))

    def jacobians(z):
        zj = jnp.asarray(z)
        return np.asarray(kern["eq_jac"](zj, params)), np.asarray(kern["ineq_jac"](zj, params))

    nlp = NLPProblem(n=kern["nz"], objective=objective, constraints=constraints,
                     jacobians=jacobians, hess=H, lb=lb, ub=ub)
    if warm_start is None:
        z0 = initial_guess(problem)
    else:
        z0 = np.asarray(warm_start, dtype=float)
    res = solve_sqp(nlp, z0, tol_kkt=cfg.kkt_tol, tol_feas=1e-8,
                    max_iter=cfg.max_sqp_iter)
    z = np.clip(res.z, lb, ub)
    states = np.vstack([problem.x0[None, :], z[:N_h * m.nx].reshape(N_h, m.nx)])
    controls = z[N_h * m.nx:].reshape(N_h, m.nu)

    groups = evaluate_constraints(problem, states, controls)
    viol = max_violation(groups)
    solve_time = time.perf_counter() - t_start
    success = viol <= cfg.violation_tol and res.kkt_residual <= cfg.kkt_tol
    solution = HorizonSolution(
        states=states, controls=controls, objective=res.objective,
        kkt_residual=res.kkt_residual, max_constraint_violation=viol,
        solve_time=solve_time, iterations=res.iterations, status=res.status,
        success=success, lam=problem.lam,
    )
    if viol > cfg.violation_tol:
        raise SolverFailure(
            f"horizon solve infeasible (violation {viol:.3e}, status {res.status})",
            best=solution,
            violations={k: float(np.max(np.abs(v))) if v.size else 0.0 for k, v in groups.items()},
        )
    return solution


def warmup_kernels(problem: HorizonProblem):
    """Compile the JAX kernels for this problem signature ahead of timing."""
    kern = _kernels_for(problem)
    kern["warmup"](_params_dict(problem))


@dataclass
class DriveRecord:
    t: float
    lam: int
    objective: float
    kkt_residual: float
    max_violation: float
    solve_time: float
    iterations: int
    status: str
    success: bool
    n_obstacles: int


@dataclass
class DriveResult:
    states: np.ndarray            # (T + 1, nx) executed ground-truth states
    controls: np.ndarray          # (T, nu) executed controls
    times: np.ndarray             # (T + 1,) uniform T_c grid
    records: list
    solutions: list
    completed: bool
    abort_reason: str | None = None


def _nearest_ref_index(ref_points, p_xy) -> int:
    d = np.hypot(*(np.asarray(ref_points) - np.asarray(p_xy)).T)
    return int(np.argmin(d))


def receding_horizon_drive(plan, initial: FormationConfig, config: PlannerConfig,
                           model: FormationModel, sensor) -> DriveResult:
    """Plan-execute loop: solve an N_h horizon, execute the first T_e worth of
    controls on the RK4 ground truth, warm-start the next solve with the
    shifted remainder, and stop once the CoM reaches the goal tolerance.

    ``sensor`` maps absolute time to the visible dynamic obstacle snapshots
    [(p_xy, v_xy, radius), ...]; it is the only obstacle channel the planner
    sees.  Three consecutive solver failures abort the drive.
    """
    cfg = config
    n_exec = cfg.n_exec
    goal = plan.ref_points[-1]
    states = [initial.state_vector()]
    controls = []
    records = []
    solutions = []
    current = initial
    t_now = 0.0
    warm = None
    prev_sol = None
    fail_streak = 0
    completed = False
    abort = None
    warmed_signatures = set()
    for _ in range(cfg.max_wall_cycles):
        p_xy = current.p[:2]
        if float(np.hypot(*(p_xy - goal))) <= cfg.goal_pos_tol:
            completed = True
            break
        lam = _nearest_ref_index(plan.ref_points, p_xy)
        obstacles = [(o[0], o[1], o[2]) for o in sensor(t_now)]
        obs_arr = np.array([[p[0], p[1], v[0], v[1], r] for p, v, r in obstacles],
                           dtype=float).reshape(-1, 5)
        problem = build_horizon_problem(model, cfg, current, plan.ref_points,
                                        plan.ref_corridor, plan.corridors, lam, obs_arr)
        sig_key = obs_arr.shape
        if sig_key not in warmed_signatures:
            warmup_kernels(problem)
            warmed_signatures.add(sig_key)
        if prev_sol is not None and len(prev_sol.controls) == cfg.n_horizon:
            warm = shift_warm_start(problem, prev_sol, n_exec)
        else:
            warm = None
        try:
            sol = solve_horizon(problem, warm_start=warm)
        except SolverFailure as exc:
            fail_streak += 1
            best = exc.best
            records.append(DriveRecord(
                t=t_now, lam=lam,
                objective=best.objective if best else math.nan,
                kkt_residual=best.kkt_residual if best else math.nan,
                max_violation=best.max_constraint_violation if best else math.nan,
                solve_time=best.solve_time if best else 0.0,
                iterations=best.iterations if best else 0,
                status="failure", success=False, n_obstacles=len(obs_arr),
            ))
            if fail_streak >= 3:
                abort = f"three consecutive solver failures at t={t_now:.2f}s"
                break
            # safe stop: hold position for one execution window and retry
            for _ in range(n_exec):
                controls.append(np.zeros(model.nu))
                states.append(states[-1].copy())
            t_now += cfg.T_e
            prev_sol = None
            continue
        fail_streak = 0
        solutions.append(sol)
        records.append(DriveRecord(
            t=t_now, lam=lam, objective=sol.objective,
            kkt_residual=sol.kkt_residual,
            max_violation=sol.max_constraint_violation,
            solve_time=sol.solve_time, iterations=sol.iterations,
            status=sol.status, success=sol.success, n_obstacles=len(obs_arr),
        ))
        # execute on the ground truth integrator (perfect low-level tracking)
        x = states[-1]
        for k in range(n_exec):
            u = sol.controls[k]
            nxt = x.copy()
            for i in range(model.n_robots):
                s_i = x[4 + i * model.nx_robot:4 + (i + 1) * model.nx_robot]
                u_i = u[i * model.nu_robot:(i + 1) * model.nu_robot]
                nxt[4 + i * model.nx_robot:4 + (i + 1) * model.nx_robot] = step_rk4(s_i, u_i, cfg.T_c)
            # object state follows the planned trajectory (rigid grasp)
            nxt[:4] = sol.states[k + 1, :4]
            controls.append(u.copy())
            states.append(nxt)
            x = nxt
        current = current.with_state_vector(states[-1])
        prev_sol = sol
        t_now += cfg.T_e
    else:
        abort = "cycle budget exhausted"
    times = np.arange(len(states)) * cfg.T_c
    return DriveResult(
        states=np.asarray(states), controls=np.asarray(controls).reshape(-1, model.nu),
        times=times, records=records, solutions=solutions,
        completed=completed, abort_reason=abort,
    )
