"""Dense strictly convex QP solver and the CBF-QP safety filters built on it.

The solver handles ``min 1/2 z'Hz + c'z  s.t.  Gz <= d`` with a primal
active-set method.  A feasible start is found by a phase-1 QP over ``(z, t)``
with rows ``Gz - t <= d``, ``t >= 0``; it is trivially feasible, and with a
small enough proximity weight its optimum lands on the feasible set
(``t* = 0``) or certifies infeasibility (``t* > 0``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .backup_cbf import RowSet
from .cbf_core import BarrierBundle, ClassKappaE, ContractError, ScaleFunction

Array = NDArray[np.float64]
log = logging.getLogger(__name__)

OMEGA_SUSPICIOUS = 1e6


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    """``min 1/2 z'Hz + c'z s.t. Gz <= d``.

    ``hard`` flags rows that describe the decision layout (input set, omega
    sign) rather than barrier conditions; Slater margins only slacken the
    remaining rows.
    """

    H: Array
    c: Array
    G: Array
    d: Array
    m: int = 0
    has_omega: bool = False
    hard: Array | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        nz = self.c.size
        self.G = np.asarray(self.G, dtype=float).reshape(-1, nz)
        self.d = np.asarray(self.d, dtype=float).ravel()
        if self.hard is None:
            self.hard = np.zeros(len(self.d), dtype=bool)
        if not np.allclose(self.H, self.H.T, atol=1e-12 * (1 + np.abs(self.H).max())):
            raise ContractError("QP Hessian must be symmetric")
        if not (np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.d))):
            raise ContractError("QP rows must be finite")

    @property
    def nz(self) -> int:
        return self.c.size

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.c @ z)


@dataclass
class QpSolution:
    z_star: Array
    status: Status
    active_set: list[int] = field(default_factory=list)
    multipliers: Array | None = None
    kkt_residual: float = np.inf
    iterations: int = 0
    residuals: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def kkt_residuals(prob: QpProblem, z, lam) -> dict:
    """Stationarity, primal feasibility, dual sign and complementarity residuals."""
    viol = prob.G @ z - prob.d if len(prob.d) else np.zeros(0)
    stat = prob.H @ z + prob.c + (prob.G.T @ lam if len(prob.d) else 0.0)
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0)),
        "primal": float(np.maximum(viol, 0.0).max(initial=0.0)),
        "dual": float(np.minimum(lam, 0.0).min(initial=0.0)),
        "complementarity": float(np.abs(lam * viol).max(initial=0.0)),
    }


def _active_set(H, c, G, d, z, W, tol, max_iter):
    """Primal active-set iterations from a feasible ``z`` with working set ``W``.

    Returns ``(z, W, mu, iterations, converged)``.
    """
    chol = cho_factor(H)
    W = list(W)
    # rows dropped for making the working set singular; not re-added until z moves
    skip: set[int] = set()
    take_multipliers = False
    mu = np.zeros(0)
    for it in range(1, max_iter + 1):
        grad = H @ z + c
        if W:
            A = G[W]
            HiAT = cho_solve(chol, A.T)
            M = A @ HiAT
            try:
                mu = np.linalg.solve(M, -HiAT.T @ grad)
            except np.linalg.LinAlgError:
                dropped = W.pop()
                skip.add(dropped)
                log.debug("singular working set, dropping row %d", dropped)
                continue
            step = -cho_solve(chol, grad + A.T @ mu)
        else:
            mu = np.zeros(0)
            step = -cho_solve(chol, grad)
        scale = 1.0 + np.abs(z).max(initial=0.0)
        if take_multipliers or np.abs(step).max(initial=0.0) <= 1e-13 * scale:
            take_multipliers = False
            if not W or mu.min() >= -tol:
                return z, W, mu, it, True
            W.pop(int(np.argmin(mu)))
            continue
        Gp = G @ step
        alpha, block = 1.0, -1
        cand = np.flatnonzero(Gp > 1e-14 * (1.0 + np.abs(G).max(axis=1)) * np.abs(step).max())
        inW = set(W) | skip
        for i in cand:
            if i in inW:
                continue
            ratio = max(d[i] - G[i] @ z, 0.0) / Gp[i]
            if ratio < alpha:
                alpha, block = ratio, int(i)
        z = z + alpha * step
        if alpha > 0:
            skip.clear()
        if block >= 0:
            W.append(block)
        else:
            take_multipliers = True
    return z, W, mu, max_iter, False


def _polish(H, c, G, d, W):
    """Solve the equality-constrained KKT system on the final working set."""
    nz = len(c)
    if not W:
        return np.linalg.solve(H, -c), np.zeros(0)
    A = G[W]
    K = np.block([[H, A.T], [A, np.zeros((len(W), len(W)))]])
    sol = np.linalg.solve(K, np.concatenate([-c, d[W]]))
    return sol[:nz], sol[nz:]


def solve_qp(prob: QpProblem, tol: float = 1e-10, max_iter: int = 500, feas_tol: float = 1e-9, z0=None) -> QpSolution:
    """Solve ``prob``; a feasible ``z0`` skips the phase-1 search."""
    H, c, G, d = prob.H, prob.c, prob.G, prob.d
    nz, nr = prob.nz, len(d)
    try:
        cho_factor(H)
    except LinAlgError as exc:
        raise ContractError("QP Hessian is not positive definite") from exc
    z_free = np.linalg.solve(H, -c)
    if nr == 0 or np.all(G @ z_free <= d + feas_tol):
        lam = np.zeros(nr)
        res = kkt_residuals(prob, z_free, lam)
        return QpSolution(z_free, Status.OPTIMAL, [], lam, max(res["stationarity"], res["primal"]), 0, res)

    if z0 is not None and np.all(G @ np.asarray(z0, dtype=float) <= d + feas_tol):
        z, W, mu, iters, ok = _active_set(H, c, G, d, np.asarray(z0, dtype=float), [], tol, max_iter)
        return _finish(prob, z, W, mu, iters, ok, feas_tol)

    # phase 1: rows [G, -1] (z, t) <= d and -t <= 0, cost t + eps/2 (|z - center|^2 + t^2).
    # With center = z_free this is exact while eps times the distance to the
    # feasible set stays below one.  A positive t* is only trusted once moving
    # the center to the phase-1 point stops reducing it (proximal point steps);
    # badly scaled problems should pass a feasible ``z0`` instead.
    eps = 1e-4
    H1 = eps * np.eye(nz + 1)
    G1 = np.vstack([np.hstack([G, -np.ones((nr, 1))]), np.concatenate([np.zeros(nz), [-1.0]])[None, :]])
    d1 = np.concatenate([d, [0.0]])
    center, t_prev, it1 = z_free, np.inf, 0
    for _ in range(50):
        c1 = np.concatenate([-eps * center, [1.0]])
        t0 = max(0.0, float((G @ center - d).max()))
        y, W1, _, it, ok1 = _active_set(H1, c1, G1, d1, np.concatenate([center, [t0]]), [], tol * eps, max_iter)
        it1 += it
        if not ok1:
            return QpSolution(y[:nz], Status.MAX_ITER, [], None, np.inf, it1)
        if y[-1] <= feas_tol:
            break
        if y[-1] >= t_prev - 1e-12 * (1.0 + t_prev):
            return QpSolution(y[:nz], Status.INFEASIBLE, [], None, np.inf, it1)
        center, t_prev = y[:nz], y[-1]
    else:
        return QpSolution(y[:nz], Status.MAX_ITER, [], None, np.inf, it1)
    if not np.all(G @ y[:nz] <= d + feas_tol + y[-1]):
        return QpSolution(y[:nz], Status.MAX_ITER, [], None, np.inf, it1)

    z0 = y[:nz]
    W0 = [i for i in W1 if i < nr]
    # keep a linearly independent subset of the phase-1 working set
    keep: list[int] = []
    for i in W0:
        if np.linalg.matrix_rank(G[keep + [i]], tol=1e-10) == len(keep) + 1 and len(keep) < nz:
            keep.append(i)
    z, W, mu, it2, ok = _active_set(H, c, G, d, z0, keep, tol, max_iter)
    return _finish(prob, z, W, mu, it1 + it2, ok, feas_tol)


def _finish(prob: QpProblem, z, W, mu, iters, ok, feas_tol) -> QpSolution:
    H, c, G, d = prob.H, prob.c, prob.G, prob.d
    if not ok:
        return QpSolution(z, Status.MAX_ITER, W, None, np.inf, iters)
    zp, mup = _polish(H, c, G, d, W)
    if np.all(G @ zp <= d + feas_tol):
        z, mu = zp, mup
    lam = np.zeros(len(d))
    lam[W] = mu
    res = kkt_residuals(prob, z, lam)
    return QpSolution(z, Status.OPTIMAL, sorted(W), lam, max(abs(v) for v in res.values()), iters, res)


# ---------------------------------------------------------------- input sets

@dataclass(frozen=True)
class InputSet:
    """Polytope ``{u : A u <= b}``."""

    A: Array
    b: Array

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def contains(self, u, tol: float = 0.0) -> bool:
        return bool(np.all(self.A @ u <= self.b + tol))


def box_input(u_max: float, m: int) -> InputSet:
    return InputSet(np.vstack([np.eye(m), -np.eye(m)]), np.full(2 * m, float(u_max)))


def polytope_from_ball(u_max: float, facets: int = 16) -> InputSet:
    """Regular polygon inscribed in the disk of radius ``u_max``."""
    if facets < 4 or facets % 2:
        raise ContractError("facet count must be even and at least 4")
    ang = 2.0 * np.pi * np.arange(facets) / facets
    A = np.column_stack([np.cos(ang), np.sin(ang)])
    return InputSet(A, np.full(facets, u_max * np.cos(np.pi / facets)))


# ---------------------------------------------------------------- filters

@dataclass
class FilterResult:
    u: Array
    omega: float
    status: Status
    solution: QpSolution
    rows: RowSet
    problem: QpProblem

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def build_filter_qp(kd, rows: RowSet, alpha: ClassKappaE, inputs: InputSet, c_omega: float | None = None) -> QpProblem:
    """Filter QP over ``u`` (``c_omega is None``) or ``(u, omega)``.

    Row ``a.u + b >= -alpha(v) - omega d`` becomes ``-a.u - d omega <= b + alpha(v)``.
    """
    kd = np.asarray(kd, dtype=float)
    m = kd.size
    rhs = rows.b + alpha(rows.v)
    if c_omega is None:
        H = 2.0 * np.eye(m)
        c = -2.0 * kd
        G = np.vstack([-rows.a.reshape(-1, m), inputs.A])
        d = np.concatenate([rhs, inputs.b])
        hard = np.r_[np.zeros(len(rows), bool), np.ones(len(inputs.b), bool)]
        return QpProblem(H, c, G, d, m=m, has_omega=False, hard=hard)
    if not c_omega > 0:
        raise ContractError("omega weight must be positive")
    H = np.diag(np.r_[np.full(m, 2.0), 2.0 * c_omega])
    c = np.r_[-2.0 * kd, 0.0]
    G = np.vstack([
        np.hstack([-rows.a.reshape(-1, m), -rows.d[:, None]]),
        np.hstack([inputs.A, np.zeros((len(inputs.b), 1))]),
        np.r_[np.zeros(m), -1.0][None, :],
    ])
    d = np.concatenate([rhs, inputs.b, [0.0]])
    hard = np.r_[np.zeros(len(rows), bool), np.ones(len(inputs.b) + 1, bool)]
    return QpProblem(H, c, G, d, m=m, has_omega=True, hard=hard)


def _run(kd, rows, alpha, inputs, c_omega, tol, max_iter) -> FilterResult:
    prob = build_filter_qp(kd, rows, alpha, inputs, c_omega)
    sol = solve_qp(prob, tol=tol, max_iter=max_iter)
    m = prob.m
    u = sol.z_star[:m].copy()
    omega = float(max(sol.z_star[m], 0.0)) if prob.has_omega else 0.0
    if omega > OMEGA_SUSPICIOUS:
        log.warning("omega* = %.3g exceeds %.0e", omega, OMEGA_SUSPICIOUS)
    return FilterResult(u, omega, sol.status, sol, rows, prob)


def bundle_rows(bundle: BarrierBundle) -> RowSet:
    return RowSet(a=bundle.lg, b=bundle.lf, v=bundle.values, d=np.zeros(bundle.p))


def filter_standard(kd, bundle: BarrierBundle, alpha: ClassKappaE, inputs: InputSet,
                    tol: float = 1e-10, max_iter: int = 500) -> FilterResult:
    """``min |u - kd|^2`` s.t. ``Lf h_j + Lg h_j u >= -alpha(h_j)`` for all j, ``u in U``."""
    return _run(kd, bundle_rows(bundle), alpha, inputs, None, tol, max_iter)


def filter_combinatorial(kd, bundle: BarrierBundle, composite: float, alpha: ClassKappaE, inputs: InputSet,
                         tol: float = 1e-10, max_iter: int = 500) -> FilterResult:
    """Rows ``hdot_j >= -alpha(h + |h_j - h|)`` without the omega variable."""
    v = composite + np.abs(bundle.values - composite)
    rows = RowSet(a=bundle.lg, b=bundle.lf, v=v, d=np.zeros(bundle.p))
    return _run(kd, rows, alpha, inputs, None, tol, max_iter)


def filter_gen_combinatorial(kd, bundle: BarrierBundle, composite: float, alpha: ClassKappaE, rho: ScaleFunction,
                             c_omega: float, inputs: InputSet, tol: float = 1e-10, max_iter: int = 500) -> FilterResult:
    """Rows ``hdot_j >= -alpha(h_j) - omega rho(h_j - h)``, cost ``|u - kd|^2 + c_omega omega^2``."""
    rows = RowSet(a=bundle.lg, b=bundle.lf, v=bundle.values, d=np.asarray(rho(bundle.values - composite), dtype=float))
    return _run(kd, rows, alpha, inputs, c_omega, tol, max_iter)


def filter_backup_single(kd, rows: RowSet, alpha: ClassKappaE, inputs: InputSet,
                         tol: float = 1e-10, max_iter: int = 500) -> FilterResult:
    """Single-backup implicit CBF-QP: all discretized rows enforced unrelaxed."""
    return _run(kd, rows, alpha, inputs, None, tol, max_iter)


def filter_aggregated_implicit(kd, rows: RowSet, alpha: ClassKappaE, c_omega: float, inputs: InputSet,
                               tol: float = 1e-10, max_iter: int = 500) -> FilterResult:
    """Aggregated implicit CBF-QP over ``(u, omega)`` with rows from
    :func:`combcbf.backup_cbf.assemble_implicit_constraints`."""
    return _run(kd, rows, alpha, inputs, c_omega, tol, max_iter)
