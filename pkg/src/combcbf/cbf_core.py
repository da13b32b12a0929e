"""Barrier-function primitives.

Class-K^e decay functions, positive definite scale functions, order-statistic
composition of primitive barriers and the active/tight index sets used by the
combinatorial filters.  Everything here is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

DEFAULT_TIGHT_TOL = 1e-9


class ContractError(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


@dataclass(frozen=True)
class ClassKappaE:
    """Linear extended class-K function ``alpha(s) = gain * s``."""

    gain: float = 1.0

    def __post_init__(self):
        if not self.gain > 0:
            raise ContractError(f"class-K gain must be positive, got {self.gain}")

    def __call__(self, s):
        return self.gain * np.asarray(s, dtype=float)


@dataclass(frozen=True)
class ScaleFunction:
    """Positive definite scale ``rho`` for the omega relaxation term."""

    kind: str = "absolute"

    def __post_init__(self):
        if self.kind not in ("absolute", "quadratic"):
            raise ContractError(f"unknown scale function kind {self.kind!r}")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "absolute":
            return np.abs(s)
        return s * s


@dataclass(frozen=True)
class ControlAffineModel:
    """``xdot = f(x) + g(x) u`` with state Jacobians.

    All callables accept states with arbitrary leading batch axes:
    ``f: (..., n) -> (..., n)``, ``g: (..., n) -> (..., n, m)``,
    ``df: (..., n) -> (..., n, n)`` and ``dg: (..., n) -> (..., n, m, n)`` where
    ``dg[..., a, i, b] = d g[a, i] / d x[b]``.
    """

    n: int
    m: int
    f: Callable[[Array], Array]
    g: Callable[[Array], Array]
    df: Callable[[Array], Array]
    dg: Callable[[Array], Array]

    def xdot(self, x, u):
        return self.f(x) + np.einsum("...ij,...j->...i", self.g(x), u)


@dataclass(frozen=True)
class Barrier:
    """A scalar constraint function with its gradient, both batch-vectorized."""

    value: Callable[[Array], Array]
    grad: Callable[[Array], Array]


@dataclass(frozen=True)
class CompositeSpec:
    """Order-statistic composition.

    Flat form: ``h = max^r {h_j}``.  Nested form (``groups`` given): each group
    ``k`` of size ``group_sizes[k]`` is reduced with its own rank
    ``group_ranks[k]`` and the outer rank ``r`` selects among group values.
    """

    r: int = 1
    group_sizes: tuple[int, ...] | None = None
    group_ranks: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.group_sizes is None:
            if self.group_ranks is not None:
                raise ContractError("group ranks given without group sizes")
            if self.r < 1:
                raise ContractError(f"rank must be >= 1, got {self.r}")
            return
        if self.group_ranks is None or len(self.group_ranks) != len(self.group_sizes):
            raise ContractError("nested composition needs one rank per group")
        for size, rank in zip(self.group_sizes, self.group_ranks):
            if not 1 <= rank <= size:
                raise ContractError(f"group rank {rank} outside 1..{size}")
        if not 1 <= self.r <= len(self.group_sizes):
            raise ContractError(f"outer rank {self.r} outside 1..{len(self.group_sizes)}")

    def evaluate(self, values: Sequence[float]) -> float:
        if self.group_sizes is None:
            return order_statistic(values, self.r)
        return nested_order_statistic(values, self.group_sizes, self.group_ranks, self.r)


@dataclass
class BarrierBundle:
    """Primitive barrier values, gradients and Lie-derivative rows at one state."""

    values: Array
    gradients: Array
    lf: Array
    lg: Array
    composite: float = field(default=np.nan)

    @property
    def p(self) -> int:
        return len(self.values)


def order_statistic(values: Sequence[float], r: int) -> float:
    """Return the ``r``-th largest entry (``r=1`` is the max, ``r=len`` the min)."""
    v = np.asarray(values, dtype=float).ravel()
    if not 1 <= r <= v.size:
        raise ContractError(f"rank {r} outside 1..{v.size}")
    if not np.all(np.isfinite(v)):
        raise ContractError("order statistic of non-finite values")
    # partition puts the (size-r)-th smallest in place, i.e. the r-th largest
    return float(np.partition(v, v.size - r)[v.size - r])


def nested_order_statistic(values, group_sizes, group_ranks, r_outer) -> float:
    v = np.asarray(values, dtype=float).ravel()
    if sum(group_sizes) != v.size:
        raise ContractError("group sizes do not cover the value vector")
    bounds = np.cumsum((0,) + tuple(group_sizes))
    inner = [order_statistic(v[a:b], rk) for a, b, rk in zip(bounds[:-1], bounds[1:], group_ranks)]
    return order_statistic(inner, r_outer)


def active_indices(values: Sequence[float]) -> list[int]:
    """Zero-based indices ``j`` with ``h_j >= 0``."""
    v = np.asarray(values, dtype=float).ravel()
    return [int(j) for j in np.flatnonzero(v >= 0.0)]


def tight_indices(values: Sequence[float], composite: float, tol: float = DEFAULT_TIGHT_TOL) -> list[int]:
    """Zero-based indices ``j`` with ``|h_j - h| <= tol``."""
    v = np.asarray(values, dtype=float).ravel()
    return [int(j) for j in np.flatnonzero(np.abs(v - composite) <= tol)]


def bundle_from_barriers(model: ControlAffineModel, barriers: Sequence[Barrier], x, spec: CompositeSpec | None = None) -> BarrierBundle:
    """Evaluate primitive barriers and their Lie derivatives at ``x``."""
    x = np.asarray(x, dtype=float)
    values = np.array([float(b.value(x)) for b in barriers])
    grads = np.array([np.asarray(b.grad(x), dtype=float) for b in barriers]).reshape(len(barriers), model.n)
    fx, gx = model.f(x), model.g(x)
    bundle = BarrierBundle(values=values, gradients=grads, lf=grads @ fx, lg=grads @ gx)
    if spec is not None:
        bundle.composite = spec.evaluate(values)
    return bundle
