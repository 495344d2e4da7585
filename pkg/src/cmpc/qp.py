"""Dense convex QP solver based on over-relaxed operator splitting.

Problems have the form

    minimize    0.5 z' H z + f' z
    subject to  A_eq z == b_eq
                A_in z <= b_in
                lb <= z <= ub

with H symmetric positive semidefinite. All constraints are stacked into a
single two-sided system ``lo <= M z <= hi`` and the splitting iteration
alternates a regularized equality-constrained minimization with a projection
onto the constraint interval. The linear system is solved through a Cholesky
factorization of the reduced matrix ``H + sigma I + M' diag(rho) M``, which
is refactored only when the penalty changes. Warm starting reuses a previous
primal/dual pair.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple

import numpy as np
import scipy.linalg

__all__ = [
    "QpStatus",
    "QpProblem",
    "QpSolution",
    "SolverSettings",
    "QpSolver",
    "solve",
    "kkt_residuals",
    "polish",
]


class QpStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    PRIMAL_INFEASIBLE = "primal_infeasible"


@dataclass
class QpProblem:
    """Dense convex quadratic program.

    ``H`` is symmetrized as ``(H + H') / 2`` on ingestion, which guards
    against assembly asymmetry. Missing constraint blocks may be ``None``;
    missing bounds default to infinite boxes.
    """

    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self) -> None:
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError(f"H must be square, got shape {H.shape}")
        d = H.shape[0]
        self.H = 0.5 * (H + H.T)
        self.f = np.asarray(self.f, dtype=float).reshape(d)
        self.A_eq, self.b_eq = _normalize_block(self.A_eq, self.b_eq, d, "A_eq")
        self.A_in, self.b_in = _normalize_block(self.A_in, self.b_in, d, "A_in")
        self.lb = np.full(d, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(d)
        self.ub = np.full(d, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(d)
        if np.any(self.lb > self.ub):
            raise ValueError("lower bounds must not exceed upper bounds")

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_in.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z)


def _normalize_block(A, b, d: int, name: str):
    if A is None:
        return np.zeros((0, d)), np.zeros(0)
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] != d:
        raise ValueError(f"{name} must have {d} columns, got shape {A.shape}")
    b = np.asarray(b, dtype=float).reshape(A.shape[0])
    return A, b


@dataclass(frozen=True)
class QpSolution:
    """Primal/dual solution with termination diagnostics."""

    z: np.ndarray
    duals_eq: np.ndarray
    duals_in: np.ndarray
    duals_bounds: np.ndarray
    status: QpStatus
    iterations: int
    r_pri: float
    r_dual: float


@dataclass(frozen=True)
class SolverSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_pri: float = 1e-8
    eps_dual: float = 1e-8
    max_iterations: int = 20000
    check_every: int = 25
    scaling_iterations: int = 3
    polish_early: bool = True
    rho_eq_scale: float = 1e3
    adaptive_rho: bool = True
    adaptive_rho_threshold: float = 10.0
    adaptive_rho_interval: int = 100
    infeasibility_window: int = 1000
    eps_infeasible: float = 1e-10


class KktResiduals(NamedTuple):
    r_pri: float
    r_dual: float
    complementarity: float


def _equilibrate(H: np.ndarray, f: np.ndarray, M: np.ndarray, iterations: int,
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """Modified Ruiz scaling of the stacked problem data.

    Returns scaled ``(H, f, M)`` together with the diagonal scalings ``D``
    (variables), ``E`` (constraint rows) and the cost scale ``c`` such that
    the scaled problem is ``min 0.5 x' (cDHD) x + (cDf)' x`` subject to
    ``E lo <= (EMD) x <= E hi``.
    """
    n = H.shape[0]
    m = M.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Hs = H.copy()
    fs = f.copy()
    Ms = M.copy()
    for _ in range(max(iterations, 0)):
        col_norms = np.maximum(np.abs(Hs).max(axis=0),
                               np.abs(Ms).max(axis=0) if m else 0.0)
        row_norms = np.abs(Ms).max(axis=1) if m else np.zeros(0)
        dd = np.where(col_norms > 0.0, 1.0 / np.sqrt(np.clip(col_norms, 1e-8, 1e8)), 1.0)
        de = np.where(row_norms > 0.0, 1.0 / np.sqrt(np.clip(row_norms, 1e-8, 1e8)), 1.0)
        Hs = dd[:, None] * Hs * dd[None, :]
        fs = dd * fs
        if m:
            Ms = de[:, None] * Ms * dd[None, :]
        D *= dd
        E *= de
        h_mean = float(np.abs(Hs).max(axis=0).mean())
        f_norm = float(np.abs(fs).max()) if fs.size else 0.0
        gamma = max(h_mean, f_norm)
        if gamma > 0.0:
            g = 1.0 / float(np.clip(gamma, 1e-8, 1e8))
            Hs *= g
            fs *= g
            c *= g
    return Hs, fs, Ms, D, E, c


class QpSolver:
    """Splitting solver instance. Owns mutable workspace; not thread-safe.

    Distinct instances may run concurrently; problems and solutions are
    immutable values.
    """

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()

    def solve(self, problem: QpProblem, warm: QpSolution | None = None,
              settings: SolverSettings | None = None) -> QpSolution:
        cfg = settings or self.settings
        d = problem.dim
        n_eq, n_in = problem.n_eq, problem.n_in
        M = np.vstack([problem.A_eq, problem.A_in, np.eye(d)])
        lo = np.concatenate([problem.b_eq, np.full(n_in, -np.inf), problem.lb])
        hi = np.concatenate([problem.b_eq, problem.b_in, problem.ub])
        m_all = M.shape[0]

        # Ruiz equilibration conditions the iteration; termination is always
        # measured on unscaled residuals, so the advertised tolerances hold
        # for the original problem.
        Hs, fs, Ms, D, E, cost_scale = _equilibrate(
            problem.H, problem.f, M, cfg.scaling_iterations)
        los = E * lo
        his = E * hi

        rho = cfg.rho
        rho_vec = self._rho_vector(rho, n_eq, n_in, d, cfg)
        chol = self._factor(Hs, Ms, rho_vec, cfg.sigma)

        if warm is not None and warm.z.shape == (d,):
            x = warm.z / D
            y_unscaled = np.concatenate([warm.duals_eq, warm.duals_in, warm.duals_bounds])
            if y_unscaled.shape == (m_all,):
                y = cost_scale * y_unscaled / E
            else:
                y = np.zeros(m_all)
        else:
            x = np.zeros(d)
            y = np.zeros(m_all)
        zc = np.clip(Ms @ x, los, his)

        status = QpStatus.MAX_ITERATIONS
        r_pri = np.inf
        r_dual = np.inf
        iterations = cfg.max_iterations
        y_prev_check = y.copy()
        window_anchor_pri = np.inf
        last_rho_update = 0
        last_polish_attempt = -10**9
        polish_attempts = 0
        alpha = cfg.alpha

        def unscaled_solution(it: int, stat: QpStatus) -> QpSolution:
            z = D * x
            duals = E * y / cost_scale
            return QpSolution(
                z=z,
                duals_eq=duals[:n_eq].copy(),
                duals_in=duals[n_eq:n_eq + n_in].copy(),
                duals_bounds=duals[n_eq + n_in:].copy(),
                status=stat, iterations=it, r_pri=r_pri, r_dual=r_dual)

        for it in range(1, cfg.max_iterations + 1):
            rhs = cfg.sigma * x - fs + Ms.T @ (rho_vec * zc - y)
            xt = scipy.linalg.cho_solve(chol, rhs, check_finite=False)
            zt = Ms @ xt
            x = alpha * xt + (1.0 - alpha) * x
            relaxed = alpha * zt + (1.0 - alpha) * zc
            zc_new = np.clip(relaxed + y / rho_vec, los, his)
            y = y + rho_vec * (relaxed - zc_new)
            zc = zc_new

            if it % cfg.check_every != 0 and it != cfg.max_iterations:
                continue
            Mx = Ms @ x
            Hx = Hs @ x
            Mty = Ms.T @ y
            r_pri = float(np.max(np.abs((Mx - zc) / E))) if m_all else 0.0
            r_dual = float(np.max(np.abs((Hx + fs + Mty) / (cost_scale * D))))
            if r_pri <= cfg.eps_pri and r_dual <= cfg.eps_dual:
                return unscaled_solution(it, QpStatus.OPTIMAL)

            if (cfg.polish_early
                    and polish_attempts < 10
                    and r_pri <= max(1e4 * cfg.eps_pri, 1e-6)
                    and r_dual <= max(1e8 * cfg.eps_dual, 1e-1)
                    and it - last_polish_attempt >= 4 * cfg.check_every):
                # A direct active-set refinement from a moderately accurate
                # iterate usually lands on the exact solution and saves the
                # long tail of first-order convergence.
                last_polish_attempt = it
                polish_attempts += 1
                refined = polish(problem, unscaled_solution(it, QpStatus.OPTIMAL))
                if refined.r_pri <= cfg.eps_pri and refined.r_dual <= cfg.eps_dual:
                    return refined

            if self._certifies_infeasible(Ms, los, his, y - y_prev_check, cfg):
                return unscaled_solution(it, QpStatus.PRIMAL_INFEASIBLE)
            y_prev_check = y.copy()

            if it % cfg.infeasibility_window == 0:
                # A primal residual that made essentially no progress since
                # the previous window has converged to a positive gap between
                # the constraint sets: treat the problem as infeasible.
                if (np.isfinite(window_anchor_pri)
                        and r_pri > max(1e3 * cfg.eps_pri, 1e-6)
                        and r_pri > 0.99 * window_anchor_pri):
                    return unscaled_solution(it, QpStatus.PRIMAL_INFEASIBLE)
                window_anchor_pri = r_pri

            if cfg.adaptive_rho and it - last_rho_update >= cfg.adaptive_rho_interval:
                # Balance the scaled residuals relative to their natural
                # magnitudes; raw ratios are misleading in early iterations.
                pri_scale = max(float(np.max(np.abs(Mx))), float(np.max(np.abs(zc))), 1e-12)
                dual_scale = max(float(np.max(np.abs(Hx))), float(np.max(np.abs(Mty))),
                                 float(np.max(np.abs(fs))), 1e-12)
                rel_pri = float(np.max(np.abs(Mx - zc))) / pri_scale if m_all else 0.0
                rel_dual = float(np.max(np.abs(Hx + fs + Mty))) / dual_scale
                if rel_dual > 0.0 and rel_pri > 0.0:
                    ratio = rel_pri / rel_dual
                    if ratio > cfg.adaptive_rho_threshold or ratio < 1.0 / cfg.adaptive_rho_threshold:
                        new_rho = float(np.clip(rho * np.sqrt(ratio), 1e-6, 1e6))
                        if not 2.0 / 3.0 < new_rho / rho < 1.5:
                            rho = new_rho
                            rho_vec = self._rho_vector(rho, n_eq, n_in, d, cfg)
                            chol = self._factor(Hs, Ms, rho_vec, cfg.sigma)
                            last_rho_update = it

        return unscaled_solution(cfg.max_iterations, QpStatus.MAX_ITERATIONS)

    @staticmethod
    def _rho_vector(rho: float, n_eq: int, n_in: int, d: int, cfg: SolverSettings) -> np.ndarray:
        return np.concatenate([
            np.full(n_eq, rho * cfg.rho_eq_scale),
            np.full(n_in + d, rho),
        ])

    @staticmethod
    def _factor(H: np.ndarray, M: np.ndarray, rho_vec: np.ndarray, sigma: float):
        reduced = H + sigma * np.eye(H.shape[0]) + (M.T * rho_vec) @ M
        return scipy.linalg.cho_factor(reduced, lower=True, check_finite=False)

    @staticmethod
    def _certifies_infeasible(M, lo, hi, delta_y, cfg: SolverSettings) -> bool:
        scale = float(np.max(np.abs(delta_y))) if delta_y.size else 0.0
        if scale <= cfg.eps_infeasible:
            return False
        v = delta_y / scale
        pos = np.maximum(v, 0.0)
        neg = np.minimum(v, 0.0)
        if np.any((pos > cfg.eps_infeasible) & np.isinf(hi)):
            return False
        if np.any((neg < -cfg.eps_infeasible) & np.isinf(lo)):
            return False
        support = float(np.where(pos > 0, hi, 0.0) @ pos + np.where(neg < 0, lo, 0.0) @ neg)
        if support >= -cfg.eps_infeasible:
            return False
        return bool(np.max(np.abs(M.T @ v)) <= 1e-8)


def solve(problem: QpProblem, warm: QpSolution | None = None,
          settings: SolverSettings | None = None) -> QpSolution:
    """One-shot convenience wrapper around :class:`QpSolver`."""
    return QpSolver(settings).solve(problem, warm=warm)


def kkt_residuals(problem: QpProblem, solution: QpSolution) -> KktResiduals:
    """Primal violation, stationarity residual and complementarity slack."""
    z = solution.z
    viols = [0.0]
    if problem.n_eq:
        viols.append(float(np.max(np.abs(problem.A_eq @ z - problem.b_eq))))
    if problem.n_in:
        viols.append(float(np.max(np.maximum(problem.A_in @ z - problem.b_in, 0.0))))
    finite_lb = np.isfinite(problem.lb)
    finite_ub = np.isfinite(problem.ub)
    if np.any(finite_lb):
        viols.append(float(np.max(np.maximum(problem.lb[finite_lb] - z[finite_lb], 0.0))))
    if np.any(finite_ub):
        viols.append(float(np.max(np.maximum(z[finite_ub] - problem.ub[finite_ub], 0.0))))
    r_pri = max(viols)

    stat = problem.H @ z + problem.f + solution.duals_bounds
    if problem.n_eq:
        stat = stat + problem.A_eq.T @ solution.duals_eq
    if problem.n_in:
        stat = stat + problem.A_in.T @ solution.duals_in
    r_dual = float(np.max(np.abs(stat)))

    if problem.n_in:
        comp = float(np.max(np.abs(solution.duals_in * (problem.A_in @ z - problem.b_in))))
    else:
        comp = 0.0
    return KktResiduals(r_pri=r_pri, r_dual=r_dual, complementarity=comp)


def polish(problem: QpProblem, solution: QpSolution,
           active_tol: float = 1e-6, delta: float = 1e-9) -> QpSolution:
    """Refine a solution by solving the KKT system of its active set.

    Inequalities and bounds that are tight at the current point (or carry a
    clearly non-zero dual) are treated as equalities and the resulting
    regularized KKT system is solved directly with a few rounds of iterative
    refinement. The polished point is returned only when it does not worsen
    either KKT residual and its duals have consistent signs; otherwise the
    original solution is kept.
    """
    if solution.status is QpStatus.PRIMAL_INFEASIBLE:
        return solution
    d = problem.dim
    z = solution.z
    rows: list[np.ndarray] = []
    targets: list[float] = []
    backmap: list[tuple[str, int]] = []
    for i in range(problem.n_eq):
        rows.append(problem.A_eq[i])
        targets.append(problem.b_eq[i])
        backmap.append(("eq", i))
    if problem.n_in:
        slack_in = problem.b_in - problem.A_in @ z
        scale_in = 1.0 + np.abs(problem.b_in)
        for i in range(problem.n_in):
            if slack_in[i] <= active_tol * scale_in[i] or solution.duals_in[i] > active_tol:
                rows.append(problem.A_in[i])
                targets.append(problem.b_in[i])
                backmap.append(("in", i))
    for i in range(d):
        lo_f = np.isfinite(problem.lb[i])
        hi_f = np.isfinite(problem.ub[i])
        at_lo = lo_f and (z[i] - problem.lb[i] <= active_tol * (1.0 + abs(problem.lb[i]))
                          or solution.duals_bounds[i] < -active_tol)
        at_hi = hi_f and (problem.ub[i] - z[i] <= active_tol * (1.0 + abs(problem.ub[i]))
                          or solution.duals_bounds[i] > active_tol)
        if at_lo and at_hi:
            # ambiguous on a pinched box; pick the nearer side
            at_hi = abs(problem.ub[i] - z[i]) < abs(z[i] - problem.lb[i])
            at_lo = not at_hi
        if at_lo or at_hi:
            e = np.zeros(d)
            e[i] = 1.0
            rows.append(e)
            targets.append(problem.lb[i] if at_lo else problem.ub[i])
            backmap.append(("lb" if at_lo else "ub", i))

    n_act = len(rows)
    G = np.vstack(rows) if n_act else np.zeros((0, d))
    g = np.asarray(targets)
    K0 = np.block([[problem.H, G.T], [G, np.zeros((n_act, n_act))]])
    rhs = np.concatenate([-problem.f, g])
    # Symmetric Ruiz scaling keeps iterative refinement effective even when
    # the active set is nearly degenerate.
    ntot = K0.shape[0]
    S = np.ones(ntot)
    Ks = K0.copy()
    for _ in range(5):
        norms = np.abs(Ks).max(axis=0)
        ss = np.where(norms > 0.0, 1.0 / np.sqrt(np.clip(norms, 1e-10, 1e10)), 1.0)
        Ks = ss[:, None] * Ks * ss[None, :]
        S *= ss
    K = Ks + delta * np.diag(np.concatenate([np.ones(d), -np.ones(n_act)]))
    rhs_s = S * rhs
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=False)
    except scipy.linalg.LinAlgError:
        return solution
    sol = scipy.linalg.lu_solve(lu, rhs_s, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return solution
    rhs_scale = max(1.0, float(np.max(np.abs(rhs_s))))
    resid = rhs_s - Ks @ sol
    err = float(np.max(np.abs(resid)))
    best, best_err = sol, err
    for _ in range(15):
        if err <= 1e-14 * rhs_scale:
            break
        sol = sol + scipy.linalg.lu_solve(lu, resid, check_finite=False)
        resid = rhs_s - Ks @ sol
        if not np.all(np.isfinite(resid)):
            break
        new_err = float(np.max(np.abs(resid)))
        if new_err < best_err:
            best, best_err = sol, new_err
        if new_err > 0.5 * err:
            break
        err = new_err
    sol = S * best

    z = sol[:d]
    y_act = sol[d:]
    duals_eq = np.zeros(problem.n_eq)
    duals_in = np.zeros(problem.n_in)
    duals_bounds = np.zeros(d)
    for value, (block, idx) in zip(y_act, backmap):
        if block == "in" and value < -1e-8:
            return solution
        if block == "lb" and value > 1e-8:
            return solution
        if block == "ub" and value < -1e-8:
            return solution
        if block == "eq":
            duals_eq[idx] = value
        elif block == "in":
            duals_in[idx] = value
        else:
            duals_bounds[idx] = value

    candidate = QpSolution(
        z=z, duals_eq=duals_eq, duals_in=duals_in, duals_bounds=duals_bounds,
        status=solution.status, iterations=solution.iterations,
        r_pri=solution.r_pri, r_dual=solution.r_dual,
    )
    before = kkt_residuals(problem, solution)
    after = kkt_residuals(problem, candidate)
    if after.r_pri <= max(before.r_pri, 1e-12) and after.r_dual <= max(before.r_dual, 1e-12):
        return replace(candidate, r_pri=after.r_pri, r_dual=after.r_dual)
    return solution
