"""Sampling audits of conjunctive compatibility and strict feasibility.

Both margins are max-slack LPs solved with the filter QP solver after adding a
tiny ``eps`` ridge so the Hessian is positive definite.  Sampling can refute
compatibility but never prove it, so reports only ever say that no violation
was found at the audited states.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from numpy.typing import NDArray

from .cbf_core import BarrierBundle, ClassKappaE, ContractError, active_indices, tight_indices
from .qp_filter import InputSet, QpProblem, Status, solve_qp

Array = NDArray[np.float64]

REG_EPS = 1e-8
UNBOUNDED = 1e6  # slack beyond this is reported as +inf


def _max_slack(G_soft, d_soft, G_hard, d_hard, nz: int, eps: float = REG_EPS) -> float:
    """``max s`` s.t. ``G_soft z + s <= d_soft``, ``G_hard z <= d_hard``."""
    G = np.vstack([
        np.hstack([G_soft, np.ones((len(d_soft), 1))]),
        np.hstack([G_hard, np.zeros((len(d_hard), 1))]),
        # keeps the regularized problem bounded when the LP is not
        np.r_[np.zeros(nz), 1.0][None, :],
    ])
    d = np.concatenate([d_soft, d_hard, [2.0 * UNBOUNDED]])
    c = np.r_[np.zeros(nz), -1.0]
    # the ridge puts the unconstrained optimum near s = 1/eps, far outside the
    # feasible set, so start from a point feasible for the hard rows instead
    if len(d_hard):
        hard = solve_qp(QpProblem(np.eye(nz), np.zeros(nz), G_hard, d_hard))
        if hard.status is Status.INFEASIBLE:
            raise ContractError("input set is empty")
        z_h = hard.z_star
    else:
        z_h = np.zeros(nz)
    s0 = min(float((d_soft - G_soft @ z_h).min(initial=np.inf)), 2.0 * UNBOUNDED)
    sol = solve_qp(QpProblem(eps * np.eye(nz + 1), c, G, d), z0=np.r_[z_h, s0])
    if not sol.optimal:
        raise ContractError(f"max-slack problem not solved: {sol.status.value}")
    s = float(sol.z_star[-1])
    return math.inf if s > UNBOUNDED else s


def compatibility_margin(x, bundle: BarrierBundle, alpha: ClassKappaE, inputs: InputSet,
                         use_tight: bool = False) -> float:
    """Largest uniform slack ``s`` with ``hdot_j(x, u) + alpha(h_j) >= s`` for every
    active ``j`` and some ``u`` in the input set.

    Positive exactly when the active barrier conditions are jointly satisfiable
    with strict inequality.  ``use_tight`` swaps the active set ``h_j >= 0`` for
    the tight set ``h_j = h``.
    """
    idx = tight_indices(bundle.values, bundle.composite) if use_tight else active_indices(bundle.values)
    if not idx:
        return math.inf
    m = inputs.m
    lg = np.asarray(bundle.lg, dtype=float).reshape(-1, m)[idx]
    rhs = np.asarray(bundle.lf, dtype=float)[idx] + alpha(np.asarray(bundle.values)[idx])
    return _max_slack(-lg, rhs, inputs.A, inputs.b, m)


def slater_margin(prob: QpProblem) -> float:
    """Largest ``s`` with ``G z <= d - s`` on the barrier rows, hard rows kept exact."""
    soft = ~np.asarray(prob.hard, dtype=bool)
    if not np.any(soft):
        return math.inf
    return _max_slack(prob.G[soft], prob.d[soft], prob.G[~soft], prob.d[~soft], prob.nz)


@dataclass
class CompatibilityReport:
    count: int = 0
    min_margin: float = math.inf
    worst_state: Array | None = None
    violations: list[tuple[Array, float]] = field(default_factory=list)
    margins: list[float] = field(default_factory=list)
    scenario: str = ""
    sampler: str = ""

    def add(self, x, margin: float) -> None:
        self.count += 1
        self.margins.append(margin)
        if margin < self.min_margin or self.worst_state is None:
            self.min_margin = min(self.min_margin, margin)
            self.worst_state = np.array(x, dtype=float)
        if not margin > 0:
            self.violations.append((np.array(x, dtype=float), margin))

    @property
    def summary(self) -> str:
        if self.violations:
            return f"{len(self.violations)} of {self.count} sampled states incompatible"
        return f"no violation found at {self.count} sampled states"

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")

        return {
            "scenario": self.scenario,
            "sampler": self.sampler,
            "count": self.count,
            "min_margin": num(self.min_margin),
            "worst_state": None if self.worst_state is None else self.worst_state.tolist(),
            "violations": [{"state": s.tolist(), "margin": num(m)} for s, m in self.violations],
            "summary": self.summary,
        }

    def to_json(self, path) -> None:
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=2))
        except OSError as exc:
            raise OSError(f"cannot write audit report to {path}: {exc}") from exc


def grid_audit(states: Iterable, bundle_at: Callable[[Array], BarrierBundle], alpha: ClassKappaE,
               inputs: InputSet, use_tight: bool = False, scenario: str = "", sampler: str = "") -> CompatibilityReport:
    """Compatibility margin at every sampled state, in sampling order."""
    report = CompatibilityReport(scenario=scenario, sampler=sampler)
    for x in states:
        report.add(x, compatibility_margin(x, bundle_at(np.asarray(x, dtype=float)), alpha, inputs, use_tight))
    return report
