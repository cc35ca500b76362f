"""Sparse SQP solver for smooth NLPs with equality and inequality constraints.

Line-search sequential quadratic programming with an l1 exact-penalty merit
function.  Each subproblem is a convex QP (constant positive-definite cost
Hessian supplied by the caller, linearized constraints, elastic slacks on
near-active inequality rows, trust-region box) solved with Clarabel.  Variable
bounds are enforced as hard QP box constraints, so every iterate satisfies
them exactly.  Deterministic given identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import SolverFailure


@dataclass
class NLPProblem:
    """Problem functions for solve_sqp.

    objective(z) -> (value, gradient); hess is the constant Gauss-Newton
    Hessian of the objective.  constraints(z) -> (c_eq, c_ineq) with the
    conventions c_eq(z) = 0 and c_ineq(z) <= 0; jacobians(z) returns the two
    Jacobians (dense or sparse).
    """

    n: int
    objective: callable
    constraints: callable
    jacobians: callable
    hess: sp.csc_matrix
    lb: np.ndarray
    ub: np.ndarray


@dataclass
class SQPResult:
    z: np.ndarray
    lam_eq: np.ndarray
    mu_ineq: np.ndarray
    objective: float
    kkt_residual: float
    max_violation: float
    iterations: int
    status: str
    history: list = field(default_factory=list)


def _violation_l1(c_eq, c_ineq):
    return float(np.sum(np.abs(c_eq)) + np.sum(np.maximum(c_ineq, 0.0)))


def _violation_inf(c_eq, c_ineq):
    v = 0.0
    if len(c_eq):
        v = float(np.max(np.abs(c_eq)))
    if len(c_ineq):
        v = max(v, float(np.max(c_ineq)))
    return v


def _solve_qp(H, g, J_eq, c_eq, J_in, c_in, slack_rows, box_lo, box_hi, rho,
              elastic_eq=False):
    """QP: min 1/2 d'Hd + g'd + rho*sum(s)  s.t. linearized constraints.

    Returns (d, s, lam_eq, mu_in, nu_box) or None when Clarabel fails.
    """
    n = len(g)
    me = len(c_eq)
    mi = len(c_in)
    ns = int(np.sum(slack_rows))
    ne = 2 * me if elastic_eq else 0
    nv = n + ns + ne

    P = sp.block_diag([H, 1e-12 * sp.eye(ns + ne)], format="csc")
    q = np.concatenate([g, rho * np.ones(ns + ne)])

    blocks_A = []
    blocks_b = []
    # equality rows: J_eq d (+ s_plus - s_minus) = -c_eq
    if me:
        cols = [sp.csc_matrix(J_eq), sp.csc_matrix((me, ns))]
        if elastic_eq:
            cols += [sp.eye(me), -sp.eye(me)]
        blocks_A.append(sp.hstack(cols))
        blocks_b.append(-c_eq)
    # inequality rows: J_in d - S s <= -c_in
    rows_nonneg_A = []
    rows_nonneg_b = []
    if mi:
        S = sp.csc_matrix(
            (np.ones(ns), (np.flatnonzero(slack_rows), np.arange(ns))), shape=(mi, ns)
        )
        cols = [sp.csc_matrix(J_in), -S]
        if elastic_eq:
            cols += [sp.csc_matrix((mi, ne))]
        rows_nonneg_A.append(sp.hstack(cols))
        rows_nonneg_b.append(-c_in)
    # slack nonnegativity
    if ns + ne:
        Z = sp.hstack([sp.csc_matrix((ns + ne, n)), -sp.eye(ns + ne)])
        rows_nonneg_A.append(Z)
        rows_nonneg_b.append(np.zeros(ns + ne))
    # box rows (finite by construction, trust region caps them)
    I = sp.eye(n)
    pad = sp.csc_matrix((n, ns + ne))
    rows_nonneg_A.append(sp.hstack([I, pad]))
    rows_nonneg_b.append(box_hi)
    rows_nonneg_A.append(sp.hstack([-I, pad]))
    rows_nonneg_b.append(-box_lo)

    A = sp.vstack(blocks_A + rows_nonneg_A, format="csc")
    b = np.concatenate(blocks_b + rows_nonneg_b)
    m_nonneg = A.shape[0] - me
    cones = []
    if me:
        cones.append(clarabel.ZeroConeT(me))
    cones.append(clarabel.NonnegativeConeT(m_nonneg))

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.max_iter = 200
    solver = clarabel.DefaultSolver(sp.triu(P, format="csc"), q, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status not in ("Solved", "AlmostSolved"):
        return None
    x = np.asarray(sol.x)
    zdual = np.asarray(sol.z)
    d = x[:n]
    s = x[n:n + ns]
    lam_eq = zdual[:me]
    mu_in = zdual[me:me + mi] if mi else np.zeros(0)
    off = me + mi + ns + ne
    nu_hi = zdual[off:off + n]
    nu_lo = zdual[off + n:off + 2 * n]
    return d, s, lam_eq, mu_in, nu_hi, nu_lo


def solve_sqp(problem: NLPProblem, z0, tol_kkt=1e-6, tol_feas=1e-8,
              max_iter=80, trust_init=0.5, trust_max=2.0, keep_history=False) -> SQPResult:
    """Solve the NLP from z0; returns the best iterate with multipliers.

    Raises SolverFailure only on internal QP breakdown; an iteration-limit
    exit is reported through ``status`` so the caller can decide.
    """
    z = np.clip(np.asarray(z0, dtype=float), problem.lb, problem.ub)
    n = problem.n
    trust = trust_init
    rho = 10.0
    f, g = problem.objective(z)
    c_eq, c_in = problem.constraints(z)
    me, mi = len(c_eq), len(c_in)
    lam = np.zeros(me)
    mu = np.zeros(mi)
    nu = np.zeros(n)
    history = []
    status = "max_iter"
    kkt = np.inf
    it = 0
    J_eq = J_in = None
    for it in range(1, max_iter + 1):
        J_eq, J_in = problem.jacobians(z)
        J_eq = J_eq.tocsr() if sp.issparse(J_eq) else sp.csr_matrix(np.asarray(J_eq, dtype=float).reshape(me, n))
        J_in = J_in.tocsr() if sp.issparse(J_in) else sp.csr_matrix(np.asarray(J_in, dtype=float).reshape(mi, n))

        viol = _violation_inf(c_eq, c_in)
        kkt = _kkt_residual(problem, z, g, J_eq, J_in, c_in, lam, mu, nu)
        if keep_history:
            history.append((f, viol, kkt, trust))
        if viol <= tol_feas and kkt <= tol_kkt:
            status = "solved"
            break

        # prune inequality rows that a trust-region step cannot activate
        if mi:
            row_gain = np.abs(J_in).sum(axis=1)
            keep = c_in >= -(row_gain * trust + 0.1)
        else:
            keep = np.zeros(0, dtype=bool)
        kept_idx = np.flatnonzero(keep)
        J_kept = J_in[kept_idx]
        c_kept = c_in[kept_idx]
        slack_rows = c_kept > -0.25

        box_hi = np.minimum(problem.ub - z, trust)
        box_lo = np.maximum(problem.lb - z, -trust)

        qp = _solve_qp(problem.hess, g, J_eq, c_eq, J_kept, c_kept,
                       slack_rows, box_lo, box_hi, rho)
        if qp is None:
            qp = _solve_qp(problem.hess, g, J_eq, c_eq, J_kept, c_kept,
                           np.ones(len(c_kept), dtype=bool), box_lo, box_hi,
                           rho, elastic_eq=True)
        if qp is None:
            trust *= 0.5
            if trust < 1e-9:
                status = "qp_failure"
                break
            continue
        d, s, lam_k, mu_k, nu_hi, nu_lo = qp
        lam = lam_k
        mu = np.zeros(mi)
        if len(kept_idx):
            mu[kept_idx] = mu_k
        # keep box duals only where the true bound, not the trust cap, binds
        hi_is_bound = (problem.ub - z) <= trust + 1e-15
        lo_is_bound = (problem.lb - z) >= -trust - 1e-15
        nu = np.where(hi_is_bound, nu_hi, 0.0) - np.where(lo_is_bound, nu_lo, 0.0)
        rho = max(rho, 2.0 * float(max(
            np.max(np.abs(lam), initial=0.0), np.max(np.abs(mu), initial=0.0), 1.0
        )))

        # l1 merit line search
        merit0 = f + rho * _violation_l1(c_eq, c_in)
        model_decrease = -(float(g @ d) + 0.5 * float(d @ (problem.hess @ d))) + rho * (
            _violation_l1(c_eq, c_in) - _violation_l1(c_eq + J_eq @ d, c_in + J_in @ d)
        )
        step_norm = float(np.max(np.abs(d))) if n else 0.0
        if step_norm <= 1e-12 and _violation_l1(c_eq, c_in) <= tol_feas:
            # stationary under the current multipliers; re-check convergence
            kkt = _kkt_residual(problem, z, g, J_eq, J_in, c_in, lam, mu, nu)
            if kkt <= tol_kkt:
                status = "solved"
                break
        alpha = 1.0
        accepted = False
        for _ in range(20):
            z_try = np.clip(z + alpha * d, problem.lb, problem.ub)
            f_try, g_try = problem.objective(z_try)
            ce_try, ci_try = problem.constraints(z_try)
            merit_try = f_try + rho * _violation_l1(ce_try, ci_try)
            if merit_try <= merit0 - 1e-4 * alpha * max(model_decrease, 0.0) + 1e-12:
                z, f, g, c_eq, c_in = z_try, f_try, g_try, ce_try, ci_try
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            trust *= 0.25
            if trust < 1e-10:
                status = "stalled"
                break
            continue
        if alpha >= 0.99 and step_norm >= 0.8 * trust:
            trust = min(trust * 2.0, trust_max)
        elif alpha < 0.1:
            trust = max(trust * 0.5, 1e-10)

    viol = _violation_inf(c_eq, c_in)
    return SQPResult(
        z=z, lam_eq=lam, mu_ineq=mu, objective=f, kkt_residual=float(kkt),
        max_violation=viol, iterations=it, status=status, history=history,
    )


def _kkt_residual(problem, z, g, J_eq, J_in, c_in, lam, mu, nu):
    """Scaled dual infeasibility and complementarity (Ipopt-style scaling)."""
    r = g.copy()
    if len(lam):
        r += J_eq.T @ lam
    if len(mu):
        r += J_in.T @ mu
    r += nu
    # drop components where the bound is active and the sign points outward
    at_ub = z >= problem.ub - 1e-12
    at_lb = z <= problem.lb + 1e-12
    r = np.where(at_ub & (r < 0), 0.0, r)
    r = np.where(at_lb & (r > 0), 0.0, r)
    stat = float(np.max(np.abs(r))) if len(r) else 0.0
    comp = float(np.max(np.abs(mu * c_in))) if len(mu) else 0.0
    total = np.sum(np.abs(lam)) + np.sum(np.abs(mu)) + np.sum(np.abs(nu))
    count = max(1, len(lam) + len(mu) + len(nu))
    s_d = max(100.0, total / count) / 100.0
    return max(stat / s_d, comp / s_d)
