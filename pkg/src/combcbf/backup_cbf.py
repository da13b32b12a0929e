"""Discretized implicit CBFs from backup policies and the aggregated barrier.

A :class:`BackupPolicy` is a *bank* of ``p`` feedback laws evaluated row-wise:
given states of shape ``(p, n)``, row ``j`` is fed to policy ``j``.  This lets
all backup flows be integrated together in a single batched RK4 pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .cbf_core import Barrier, ClassKappaE, ContractError, ControlAffineModel, ScaleFunction
from .ode_flow import VectorField, flow_arrays

Array = NDArray[np.float64]


@dataclass(frozen=True)
class BackupPolicy:
    """``p`` backup feedbacks with terminal barriers ``h_j = gamma_j - V_j``.

    ``k: (p, n) -> (p, m)``, ``dk: (p, n) -> (p, m, n)``,
    ``h: (p, n) -> (p,)``, ``dh: (p, n) -> (p, n)``.
    """

    p: int
    k: Callable[[Array], Array]
    dk: Callable[[Array], Array]
    h: Callable[[Array], Array]
    dh: Callable[[Array], Array]
    gamma: Array
    ids: tuple[int, ...] = ()
    project: Callable[[Array], Array] | None = None
    k_dk: Callable[[Array], tuple[Array, Array]] | None = None

    def __post_init__(self):
        if not self.ids:
            object.__setattr__(self, "ids", tuple(range(1, self.p + 1)))


def backup_field(model: ControlAffineModel, policy: BackupPolicy) -> VectorField:
    """Closed-loop backup field ``f + g k_b`` with its full Jacobian."""

    def fun(X):
        return model.f(X) + np.einsum("...ai,...i->...a", model.g(X), policy.k(X))

    def fun_jac(X):
        if policy.k_dk is not None:
            u, du = policy.k_dk(X)
        else:
            u, du = policy.k(X), policy.dk(X)
        g = model.g(X)
        F = model.f(X) + (g @ u[..., None])[..., 0]
        D = model.df(X) + (u[..., None, None, :] @ model.dg(X))[..., 0, :] + g @ du
        return F, D

    def jac(X):
        return fun_jac(X)[1]

    return VectorField(n=model.n, fun=fun, jac=jac, project=policy.project, fun_jac=fun_jac)


@dataclass
class ImplicitCbfEval:
    """Per-policy samples of the safety constraints along the backup flow.

    ``psi_values[k, i]`` is constraint ``i`` at the sample time ``tau[k]``;
    ``psi_grads[k, i]`` its gradient pulled back to the current state through
    the flow sensitivity.  The terminal barrier is ``h_j(phi(T, x))``.
    ``phi`` holds the whole flow ``tau_0..tau_N``; ``tau`` only the sampled times.
    """

    policy_id: int
    tau: Array
    phi: Array
    psi_values: Array
    psi_grads: Array
    terminal_value: float
    terminal_grad: Array

    @property
    def value(self) -> float:
        return float(min(self.psi_values.min(), self.terminal_value))

    def all_values(self) -> Array:
        return np.append(self.psi_values.ravel(), self.terminal_value)

    def all_grads(self) -> Array:
        n = self.terminal_grad.size
        return np.vstack([self.psi_grads.reshape(-1, n), self.terminal_grad[None, :]])


def _as_list(safety) -> list[Barrier]:
    return [safety] if isinstance(safety, Barrier) else list(safety)


def eval_implicit_cbfs(model: ControlAffineModel, policy: BackupPolicy, safety, x, T: float, N: int,
                       include_start: bool = False) -> list[ImplicitCbfEval]:
    """Integrate all backup flows from ``x`` and sample every constraint.

    ``safety`` is a :class:`Barrier` or a sequence of them (one row family per
    constraint).  Constraints are sampled at ``tau_1..tau_N``; ``include_start``
    adds ``tau_0``.  That row is ``psi`` at the current state, which has no
    input dependence when ``psi`` has relative degree above one.
    """
    x = np.asarray(x, dtype=float)
    cons = _as_list(safety)
    X0 = np.broadcast_to(x, (policy.p, model.n))
    flow = flow_arrays(backup_field(model, policy), X0, T, N)
    psi = np.stack([np.asarray(c.value(flow.phi), dtype=float) for c in cons], axis=-1)       # (N+1, p, q)
    psi_grad = np.stack([np.einsum("kpa,kpab->kpb", c.grad(flow.phi), flow.Q) for c in cons], axis=-2)  # (N+1, p, q, n)
    k0 = 0 if include_start else 1
    psi, psi_grad = psi[k0:], psi_grad[k0:]
    term = np.asarray(policy.h(flow.phi[-1]), dtype=float)                                     # (p,)
    term_grad = np.einsum("pa,pab->pb", policy.dh(flow.phi[-1]), flow.Q[-1])                  # (p, n)
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(term))):
        raise FloatingPointError("non-finite barrier value along a backup flow")
    return [
        ImplicitCbfEval(
            policy_id=policy.ids[j],
            tau=flow.tau[k0:],
            phi=flow.phi[:, j],
            psi_values=psi[:, j].copy(),
            psi_grads=psi_grad[:, j].copy(),
            terminal_value=float(term[j]),
            terminal_grad=term_grad[j].copy(),
        )
        for j in range(policy.p)
    ]


def eval_implicit_cbf(model, policy: BackupPolicy, safety: Barrier, x, T: float, N: int,
                      include_start: bool = False) -> ImplicitCbfEval:
    if policy.p != 1:
        raise ContractError("eval_implicit_cbf expects a single-policy bank")
    return eval_implicit_cbfs(model, policy, safety, x, T, N, include_start)[0]


def aggregated_value(evals: Sequence[ImplicitCbfEval]) -> float:
    if len(evals) == 0:
        raise ContractError("aggregated value of an empty policy set")
    return max(e.value for e in evals)


def membership(x, evals: Sequence[ImplicitCbfEval]) -> tuple[bool, float]:
    h = aggregated_value(evals)
    return h >= 0.0, h


@dataclass
class ConstraintRow:
    a: Array
    b: float
    v: float
    d: float


@dataclass
class RowSet:
    """Stacked rows ``a . u + b >= -alpha(v) - omega * d``."""

    a: Array
    b: Array
    v: Array
    d: Array

    def __len__(self) -> int:
        return len(self.b)

    def __iter__(self) -> Iterator[ConstraintRow]:
        for a, b, v, d in zip(self.a, self.b, self.v, self.d):
            yield ConstraintRow(a=a, b=float(b), v=float(v), d=float(d))

    @classmethod
    def concat(cls, sets: Sequence["RowSet"]) -> "RowSet":
        return cls(*(np.concatenate([getattr(s, k) for s in sets]) for k in ("a", "b", "v", "d")))

    def slack(self, u, omega: float, alpha: ClassKappaE) -> Array:
        return self.a @ u + self.b + alpha(self.v) + omega * self.d


def _pullback_rows(model: ControlAffineModel, x, values, grads) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=float)
    return grads @ model.g(x), grads @ model.f(x)


def assemble_implicit_constraints(evals: Sequence[ImplicitCbfEval], h_agg: float, alpha: ClassKappaE,
                                  rho: ScaleFunction, model: ControlAffineModel, x) -> RowSet:
    """Rows of the aggregated implicit CBF-QP, ``p * (N q + 1)`` of them for
    ``q`` safety constraints sampled at ``tau_1..tau_N``.

    For each policy: one row per constraint and sample plus its terminal row.
    The decay uses the row's own barrier value; the gap ``rho(v - h_agg)``
    multiplies omega.
    """
    values = np.concatenate([e.all_values() for e in evals])
    grads = np.vstack([e.all_grads() for e in evals])
    a, b = _pullback_rows(model, x, values, grads)
    return RowSet(a=a, b=b, v=values, d=np.asarray(rho(values - h_agg), dtype=float))


def single_backup_rows(ev: ImplicitCbfEval, model: ControlAffineModel, x) -> RowSet:
    """Unrelaxed discretized implicit CBF rows of a single backup policy."""
    values, grads = ev.all_values(), ev.all_grads()
    a, b = _pullback_rows(model, x, values, grads)
    return RowSet(a=a, b=b, v=values, d=np.zeros_like(values))
