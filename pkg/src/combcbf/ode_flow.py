"""Fixed-step RK4 flows with variational (sensitivity) propagation.

States may carry leading batch axes, so a bank of ``p`` backup fields can be
integrated in one pass: ``x`` of shape ``(p, n)`` and sensitivities of shape
``(p, n, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]


class IntegrationDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class VectorField:
    """Autonomous field ``x -> F(x)`` with Jacobian ``x -> DF(x)``.

    ``project`` is an optional post-step map back onto a state manifold.  The
    variational equation ignores its derivative.  ``fun_jac``, when given,
    returns both at once and lets shared work be done a single time.
    """

    n: int
    fun: Callable[[Array], Array]
    jac: Callable[[Array], Array]
    project: Optional[Callable[[Array], Array]] = None
    fun_jac: Optional[Callable[[Array], tuple[Array, Array]]] = None

    def both(self, x):
        if self.fun_jac is not None:
            return self.fun_jac(x)
        return self.fun(x), self.jac(x)


@dataclass
class FlowSample:
    tau: float
    phi: Array
    Q: Array


@dataclass
class FlowArrays:
    """Stacked flow samples: ``phi[k]`` and ``Q[k]`` at ``tau[k] = k * T / N``."""

    tau: Array
    phi: Array
    Q: Array

    def samples(self) -> list[FlowSample]:
        return [FlowSample(float(t), p, q) for t, p, q in zip(self.tau, self.phi, self.Q)]


def _check(x):
    if not np.all(np.isfinite(x)):
        raise IntegrationDiverged("non-finite state during RK4 integration")
    return x


def rk4_step(field: VectorField, x, dt: float):
    if not dt > 0:
        raise ValueError(f"step must be positive, got {dt}")
    F = field.fun
    k1 = _check(F(x))
    k2 = _check(F(x + 0.5 * dt * k1))
    k3 = _check(F(x + 0.5 * dt * k2))
    k4 = _check(F(x + dt * k3))
    out = _check(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    if field.project is not None:
        out = field.project(out)
    return out


def rk4_variational_step(field: VectorField, x, Q, dt: float):
    """One RK4 step of the augmented system ``(x, Q)`` with ``Qdot = DF(x) Q``."""
    both = field.both
    k1, D = both(x)
    l1 = D @ Q
    k2, D = both(x + 0.5 * dt * _check(k1))
    l2 = D @ (Q + 0.5 * dt * l1)
    k3, D = both(x + 0.5 * dt * _check(k2))
    l3 = D @ (Q + 0.5 * dt * l2)
    k4, D = both(x + dt * _check(k3))
    _check(k4)
    l4 = D @ (Q + dt * l3)
    x_new = _check(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    Q_new = _check(Q + (dt / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4))
    if field.project is not None:
        x_new = field.project(x_new)
    return x_new, Q_new


def flow_arrays(field: VectorField, x0, T: float, N: int) -> FlowArrays:
    if N < 1 or not T > 0:
        raise ValueError(f"need N >= 1 and T > 0, got N={N}, T={T}")
    x = np.array(x0, dtype=float)
    n = field.n
    Q = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()
    dt = T / N
    phi = np.empty((N + 1,) + x.shape)
    Qs = np.empty((N + 1,) + Q.shape)
    phi[0], Qs[0] = x, Q
    for k in range(N):
        x, Q = rk4_variational_step(field, x, Q, dt)
        phi[k + 1], Qs[k + 1] = x, Q
    return FlowArrays(tau=np.arange(N + 1) * dt, phi=phi, Q=Qs)


def integrate_flow(field: VectorField, x0, T: float, N: int) -> list[FlowSample]:
    """Samples of the flow and its sensitivity at ``tau_k = k T / N``, ``k = 0..N``."""
    return flow_arrays(field, x0, T, N).samples()


def integrate_state(field: VectorField, x0, T: float, N: int):
    x = np.array(x0, dtype=float)
    dt = T / N
    for _ in range(N):
        x = rk4_step(field, x, dt)
    return x


def finite_diff_sensitivity(field: VectorField, x0, tau: float, h_fd: float = 1e-5, N: int | None = None):
    """Central-difference estimate of ``d phi(tau, x) / d x`` at ``x0``.

    ``N`` defaults to 40 steps over ``tau``; use the same step count as the
    variational run when comparing the two.
    """
    if not h_fd > 0:
        raise ValueError("finite-difference step must be positive")
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[-1]
    steps = N if N is not None else 40
    if tau == 0:
        return np.eye(n)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h_fd
        plus = integrate_state(field, x0 + e, tau, steps)
        minus = integrate_state(field, x0 - e, tau, steps)
        cols.append((plus - minus) / (2.0 * h_fd))
    return np.stack(cols, axis=-1)
