"""Fast oracle checks behind ``combcbf selftest``.

Each check returns ``(name, passed, detail)``; together they take about a second.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .cbf_core import BarrierBundle, ClassKappaE, ScaleFunction
from .ode_flow import VectorField, flow_arrays
from .qp_filter import QpProblem, box_input, filter_gen_combinatorial, filter_standard, kkt_residuals, solve_qp
from .scenario_orbit import care_residual, linearized_pair, solve_care


def check_qp_kkt(trials: int = 50, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        nz, nr = rng.integers(1, 7), rng.integers(1, 41)
        L = rng.standard_normal((nz, nz))
        H = L @ L.T + 0.1 * np.eye(nz)
        G = rng.standard_normal((nr, nz))
        # rows pass through a known interior point, so the QP is feasible
        z_in = rng.standard_normal(nz)
        d = G @ z_in + rng.uniform(0.0, 1.0, nr)
        prob = QpProblem(H, rng.standard_normal(nz), G, d)
        sol = solve_qp(prob)
        if not sol.optimal:
            return "qp kkt", False, f"status {sol.status.value}"
        worst = max(worst, max(abs(v) for v in kkt_residuals(prob, sol.z_star, sol.multipliers).values()))
    return "qp kkt", worst <= 1e-8, f"worst residual {worst:.2e} over {trials} QPs"


def check_care():
    P = solve_care([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    scalar = abs(P[0, 0] - (1.0 + np.sqrt(2.0)))
    A, B = linearized_pair()
    P3 = solve_care(A, B, np.eye(3), np.eye(2))
    res = care_residual(A, B, np.eye(3), np.eye(2), P3)
    stable = np.linalg.eigvals(A - B @ B.T @ P3).real.max() < 0
    ok = scalar <= 1e-10 and res <= 1e-8 and stable
    return "care", ok, f"scalar error {scalar:.1e}, orbit residual {res:.1e}"


def check_rk4_sensitivity():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    field = VectorField(2, lambda x: x @ A.T, lambda x: np.broadcast_to(A, x.shape[:-1] + (2, 2)))
    flow = flow_arrays(field, np.array([1.0, 0.0]), 2.0, 40)
    err = np.abs(flow.Q[-1] - expm(2.0 * A)).max()
    return "rk4 sensitivity", err <= 1e-6, f"max error vs expm {err:.1e}"


def check_reduction():
    # 1D integrator, h = x at x = 0: gen-combinatorial with one barrier is the standard filter
    bundle = BarrierBundle(values=np.array([0.0]), gradients=np.array([[1.0]]), lf=np.array([0.0]),
                           lg=np.array([[1.0]]), composite=0.0)
    alpha, U = ClassKappaE(1.0), box_input(1.0, 1)
    std = filter_standard([-2.0], bundle, alpha, U)
    gen = filter_gen_combinatorial([-2.0], bundle, 0.0, alpha, ScaleFunction(), 1.0, U)
    err = abs(std.u[0] - gen.u[0])
    ok = err <= 1e-9 and abs(std.u[0]) <= 1e-9
    return "p = 1 reduction", ok, f"u* = {std.u[0]:.2e}, difference {err:.1e}"


CHECKS = (check_qp_kkt, check_care, check_rk4_sensitivity, check_reduction)


def run_all():
    out = []
    for check in CHECKS:
        try:
            out.append(check())
        except Exception as exc:  # a crash is a failed check, reported not raised
            out.append((check.__name__, False, f"{type(exc).__name__}: {exc}"))
    return out
