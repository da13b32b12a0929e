"""Planar station keeping around a small asteroid.

State ``x = (r, theta, rdot, thetadot)`` in nondimensional units (length
``L_c``, time ``t_c`` with ``mu = 1``); inputs are radial and tangential
accelerations bounded componentwise.  Backup sets are CARE-Lyapunov sublevel
sets around circular orbits, each stabilized by a saturated Sontag feedback.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

from .backup_cbf import BackupPolicy
from .cbf_core import Barrier, ContractError, ControlAffineModel
from .qp_filter import box_input

G_GRAV = 6.674e-11
M_BENNU = 7.329e10


class OrbitSingularity(FloatingPointError):
    pass


class CareError(RuntimeError):
    pass


@dataclass
class OrbitParams:
    """Physical constants in SI units; derived nondimensional values are properties."""

    G: float = G_GRAV
    M: float = M_BENNU
    u_max: float = 2.5e-4          # m/s^2
    T: float = 5e3                 # s
    R_keepin: float = 1.225e3      # m
    p_o: float = 428.8             # m
    e_o: float = 0.5
    p_d: float = 646.9             # m
    e_d: float = 0.4375
    gamma: float = 0.05            # nondimensional
    n_backup: int = 4
    L_c: float = 245.03            # m
    radii: tuple | None = None     # m; default geometric spacing, see backup_radii
    inner_factor: float = 1.1
    outer_factor: float = 0.95
    k_p: float = 1.0
    k_v: float = 2.0
    k_h: float = 1.0
    eps_b: float = 1e-10

    def __post_init__(self):
        if self.p_o > self.R_keepin * (1.0 - self.e_o):
            raise ContractError("keep-in radius must satisfy p_o <= R (1 - e_o)")

    @property
    def mu(self) -> float:
        return self.G * self.M

    @property
    def t_c(self) -> float:
        return float(np.sqrt(self.L_c ** 3 / self.mu))

    @property
    def u_max_nd(self) -> float:
        return self.u_max * self.t_c ** 2 / self.L_c

    @property
    def T_nd(self) -> float:
        return self.T / self.t_c

    def backup_radii(self) -> np.ndarray:
        """Circular-orbit radii in meters, outermost last."""
        if self.radii is not None:
            return np.asarray(self.radii, dtype=float)
        lo = self.inner_factor * self.p_o / (1.0 - self.e_o)
        hi = self.outer_factor * self.R_keepin
        return np.geomspace(lo, hi, self.n_backup)

    @classmethod
    def from_dict(cls, d: dict) -> "OrbitParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown orbit parameters: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------ unit conversion

def nondimensionalize(x_si, params: OrbitParams):
    x = np.array(x_si, dtype=float)
    L, tc = params.L_c, params.t_c
    x[..., 0] /= L
    x[..., 2] *= tc / L
    x[..., 3] *= tc
    return x


def redimensionalize(x_nd, params: OrbitParams):
    x = np.array(x_nd, dtype=float)
    L, tc = params.L_c, params.t_c
    x[..., 0] *= L
    x[..., 2] *= L / tc
    x[..., 3] /= tc
    return x


def input_to_si(u_nd, params: OrbitParams):
    return np.asarray(u_nd, dtype=float) * params.L_c / params.t_c ** 2


def input_to_nd(u_si, params: OrbitParams):
    return np.asarray(u_si, dtype=float) * params.t_c ** 2 / params.L_c


# ------------------------------------------------------------ dynamics

def _radius(x):
    r = x[..., 0]
    if np.any(r <= 0):
        raise OrbitSingularity("radius reached zero")
    return r


def make_model(mu: float = 1.0) -> ControlAffineModel:
    def f(x):
        r = _radius(x)
        rd, thd = x[..., 2], x[..., 3]
        return np.stack([rd, thd, r * thd ** 2 - mu / r ** 2, -2.0 * rd * thd / r], axis=-1)

    def g(x):
        r = _radius(x)
        out = np.zeros(x.shape[:-1] + (4, 2))
        out[..., 2, 0] = 1.0
        out[..., 3, 1] = 1.0 / r
        return out

    def df(x):
        r = _radius(x)
        rd, thd = x[..., 2], x[..., 3]
        J = np.zeros(x.shape[:-1] + (4, 4))
        J[..., 0, 2] = 1.0
        J[..., 1, 3] = 1.0
        J[..., 2, 0] = thd ** 2 + 2.0 * mu / r ** 3
        J[..., 2, 3] = 2.0 * r * thd
        J[..., 3, 0] = 2.0 * rd * thd / r ** 2
        J[..., 3, 2] = -2.0 * thd / r
        J[..., 3, 3] = -2.0 * rd / r
        return J

    def dg(x):
        r = _radius(x)
        out = np.zeros(x.shape[:-1] + (4, 2, 4))
        out[..., 3, 1, 0] = -1.0 / r ** 2
        return out

    return ControlAffineModel(n=4, m=2, f=f, g=g, df=df, dg=dg)


def orbit_dynamics(x, u, mu: float = 1.0):
    return make_model(mu).xdot(np.asarray(x, dtype=float), np.asarray(u, dtype=float))


# ------------------------------------------------------------ constraints

def keepout_barrier(p_o_nd: float, e_o: float) -> Barrier:
    """``psi_1 = r - p_o / (1 + e_o cos theta)`` (outside the debris ellipse)."""

    def value(x):
        return x[..., 0] - p_o_nd / (1.0 + e_o * np.cos(x[..., 1]))

    def grad(x):
        th = x[..., 1]
        out = np.zeros(x.shape)
        out[..., 0] = 1.0
        out[..., 1] = -p_o_nd * e_o * np.sin(th) / (1.0 + e_o * np.cos(th)) ** 2
        return out

    return Barrier(value, grad)


def keepin_barrier(R_nd: float) -> Barrier:
    """``psi_2 = R - r``."""

    def value(x):
        return R_nd - x[..., 0]

    def grad(x):
        out = np.zeros(x.shape)
        out[..., 0] = -1.0
        return out

    return Barrier(value, grad)


# ------------------------------------------------------------ CARE

def _lyap(Ak, Qk):
    """Solve ``Ak' P + P Ak + Qk = 0`` by vectorization."""
    n = Ak.shape[0]
    I = np.eye(n)
    K = np.kron(I, Ak.T) + np.kron(Ak.T, I)
    P = np.linalg.solve(K, -Qk.reshape(-1)).reshape(n, n)
    return 0.5 * (P + P.T)


def care_residual(A, B, Q, R, P) -> float:
    Rinv = np.linalg.inv(R)
    return float(np.linalg.norm(A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q))


def solve_care(A, B, Q, R, K0=None, tol: float = 1e-13, max_iter: int = 100):
    """Stabilizing solution of ``A'P + PA - P B R^-1 B' P + Q = 0`` (Newton-Kleinman).

    Without ``K0`` an initial stabilizing gain comes from Bass's construction.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    n = A.shape[0]
    if K0 is None:
        beta = 1.0 + np.abs(np.linalg.eigvals(A)).max()
        Ab = A + beta * np.eye(n)
        # Ab X + X Ab' = 2 B B'
        X = _lyap(-Ab.T, 2.0 * B @ B.T)
        K = B.T @ np.linalg.inv(X)
    else:
        K = np.atleast_2d(np.asarray(K0, dtype=float))
    if np.linalg.eigvals(A - B @ K).real.max() >= 0:
        raise CareError("initial gain is not stabilizing")
    P = np.zeros((n, n))
    for _ in range(max_iter):
        Ak = A - B @ K
        P_new = _lyap(Ak, Q + K.T @ R @ K)
        K = np.linalg.solve(R, B.T @ P_new)
        if np.linalg.norm(P_new - P) <= tol * (1.0 + np.linalg.norm(P_new)):
            P = P_new
            break
        P = P_new
    else:
        raise CareError(f"Newton-Kleinman did not converge, residual {care_residual(A, B, Q, R, P):.3e}")
    return P


def linearized_pair():
    """Feedback-linearized reduced dynamics of ``y = (r, rdot, thetadot)``."""
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    B = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return A, B


# ------------------------------------------------------------ backup bank

_Y = [0, 2, 3]  # reduced coordinates inside the full state


def _embed_grad(v):
    out = np.zeros(v.shape[:-1] + (4,))
    out[..., _Y] = v
    return out


class SontagBank:
    """Saturated Sontag feedbacks for Lyapunov functions ``(y - y*_j)' P (y - y*_j)``.

    Parameter arrays carry a leading policy axis and broadcast against states
    of shape ``(..., p, 4)``.
    """

    def __init__(self, model: ControlAffineModel, ystar, P, gamma, u_max: float, eps_b: float = 1e-10, ids=None):
        self.model = model
        self.ystar = np.atleast_2d(ystar)
        self.P = np.asarray(P, dtype=float).reshape(-1, 3, 3)
        self.gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (len(self.ystar),)).copy()
        self.u_max = u_max
        self.eps_b = eps_b
        self.ids = tuple(ids) if ids is not None else tuple(range(1, len(self.ystar) + 1))
        self.H4 = np.zeros((len(self.ystar), 4, 4))
        for i, a in enumerate(_Y):
            for j, b in enumerate(_Y):
                self.H4[:, a, b] = 2.0 * self.P[:, i, j]

    @property
    def p(self) -> int:
        return len(self.ystar)

    def V(self, x):
        e = x[..., _Y] - self.ystar
        return np.einsum("...i,...ij,...j->...", e, self.P, e)

    def grad_V(self, x):
        e = x[..., _Y] - self.ystar
        return _embed_grad(2.0 * np.einsum("...ij,...j->...i", self.P, e))

    def h(self, x):
        return self.gamma - self.V(x)

    def dh(self, x):
        return -self.grad_V(x)

    def _lie(self, x):
        gV = self.grad_V(x)
        fx, gx = self.model.f(x), self.model.g(x)
        a = np.einsum("...a,...a->...", gV, fx)
        b = np.einsum("...a,...ai->...i", gV, gx)
        return gV, fx, gx, a, b

    def unclamped(self, x):
        _, _, _, a, b = self._lie(x)
        beta = np.einsum("...i,...i->...", b, b)
        s = np.sqrt(a * a + beta * beta)
        # a + s without cancellation when a < 0
        num = np.where(a > 0, a + s, beta * beta / np.where(s - a > 0, s - a, 1.0))
        kappa = np.where(beta > self.eps_b, num / np.where(beta > self.eps_b, beta, 1.0), 0.0)
        return -kappa[..., None] * b

    def k(self, x):
        return np.clip(self.unclamped(x), -self.u_max, self.u_max)

    def dk(self, x):
        return self.k_dk(x)[1]

    def k_dk(self, x):
        """Clamped feedback and its Jacobian (zero rows where a component saturates)."""
        gV, fx, gx, a, b = self._lie(x)
        H4 = self.H4
        Hf = (H4 @ fx[..., None])[..., 0]
        da = Hf + (gV[..., None, :] @ self.model.df(x))[..., 0, :]
        db = np.swapaxes(H4 @ gx, -1, -2) + (gV[..., None, None, :] @ np.swapaxes(self.model.dg(x), -3, -2))[..., 0, :]
        beta = (b * b).sum(-1)
        dbeta = 2.0 * (b[..., None, :] @ db)[..., 0, :]
        s = np.sqrt(a * a + beta * beta)
        safe_s = np.where(s > 0, s, 1.0)
        ds = (a[..., None] * da + beta[..., None] * dbeta) / safe_s[..., None]
        pos = a > 0
        sma = np.where(s - a > 0, s - a, 1.0)
        num = np.where(pos, a + s, beta * beta / sma)
        dnum_pos = da + ds
        dnum_neg = (2.0 * beta[..., None] * dbeta * sma[..., None] - (beta * beta)[..., None] * (ds - da)) / (sma ** 2)[..., None]
        dnum = np.where(pos[..., None], dnum_pos, dnum_neg)
        ok = beta > self.eps_b
        sb = np.where(ok, beta, 1.0)
        kappa = np.where(ok, num / sb, 0.0)
        dkappa = np.where(ok[..., None], (dnum * sb[..., None] - num[..., None] * dbeta) / (sb ** 2)[..., None], 0.0)
        du = -(b[..., :, None] * dkappa[..., None, :] + kappa[..., None, None] * db)
        u = -kappa[..., None] * b
        sat = np.abs(u) > self.u_max
        return np.clip(u, -self.u_max, self.u_max), np.where(sat[..., None], 0.0, du)

    def policy(self) -> BackupPolicy:
        return BackupPolicy(p=self.p, k=self.k, dk=self.dk, h=self.h, dh=self.dh, gamma=self.gamma, ids=self.ids,
                            k_dk=self.k_dk)

    def subset(self, idx) -> "SontagBank":
        idx = list(idx)
        return SontagBank(self.model, self.ystar[idx], self.P[idx], self.gamma[idx], self.u_max, self.eps_b,
                          ids=[self.ids[i] for i in idx])

    def barrier(self, j: int) -> Barrier:
        sub = self.subset([j])
        return Barrier(lambda x: sub.h(x[..., None, :])[..., 0], lambda x: sub.dh(x[..., None, :])[..., 0, :])


# ------------------------------------------------------------ nominal tracker

def desired_radius(theta, p_d_nd: float, e_d: float):
    c, s = np.cos(theta), np.sin(theta)
    den = 1.0 + e_d * c
    r = p_d_nd / den
    dr = p_d_nd * e_d * s / den ** 2
    ddr = p_d_nd * e_d * (c * den + 2.0 * e_d * s * s) / den ** 3
    return r, dr, ddr


def nominal_orbit_tracker(x, params: OrbitParams, mu: float = 1.0):
    """Feedback-linearizing radial PD plus angular-momentum regulation toward the desired ellipse."""
    r, th, rd, thd = x
    p_d = params.p_d / params.L_c
    r_d, dr_d, ddr_d = desired_radius(th, p_d, params.e_d)
    H_d = np.sqrt(mu * p_d)
    u2 = -params.k_h * (r * r * thd - H_d) / r
    thdd = -2.0 * rd * thd / r + u2 / r
    e = r - r_d
    ed = rd - dr_d * thd
    u1 = -(r * thd ** 2 - mu / r ** 2) + ddr_d * thd ** 2 + dr_d * thdd - params.k_p * e - params.k_v * ed
    u = np.array([u1, u2])
    return np.clip(u, -params.u_max_nd, params.u_max_nd)


def radial_tracking_error(x, params: OrbitParams) -> float:
    """Radial distance to the desired ellipse in meters."""
    r_d, _, _ = desired_radius(x[1], params.p_d / params.L_c, params.e_d)
    return float(abs(x[0] - r_d) * params.L_c)


# ------------------------------------------------------------ scenario bundle

@dataclass
class OrbitScenario:
    params: OrbitParams = field(default_factory=OrbitParams)

    name = "orbit"

    @cached_property
    def model(self) -> ControlAffineModel:
        return make_model(1.0)

    @cached_property
    def P(self) -> np.ndarray:
        A, B = linearized_pair()
        return solve_care(A, B, np.eye(3), np.eye(2))

    @cached_property
    def ystar(self) -> np.ndarray:
        r = self.params.backup_radii() / self.params.L_c
        return np.column_stack([r, np.zeros_like(r), r ** -1.5])

    @cached_property
    def bank(self) -> SontagBank:
        p = len(self.ystar)
        return SontagBank(self.model, self.ystar, np.broadcast_to(self.P, (p, 3, 3)), self.params.gamma,
                          self.params.u_max_nd, self.params.eps_b)

    @cached_property
    def safety(self) -> list[Barrier]:
        pr = self.params
        return [keepout_barrier(pr.p_o / pr.L_c, pr.e_o), keepin_barrier(pr.R_keepin / pr.L_c)]

    @cached_property
    def inputs(self):
        return box_input(self.params.u_max_nd, 2)

    @property
    def T(self) -> float:
        return self.params.T_nd

    @property
    def single_index(self) -> int:
        """The outermost backup orbit, used by the single-set variants."""
        return len(self.ystar) - 1

    def explicit_barriers(self, idx=None) -> list[Barrier]:
        idx = range(self.bank.p) if idx is None else idx
        return [self.bank.barrier(j) for j in idx]

    def default_x0(self) -> np.ndarray:
        """On the boundary of the outermost backup set, displaced radially inward."""
        j = self.single_index
        y = self.ystar[j]
        dr = np.sqrt(self.bank.gamma[j] / self.bank.P[j, 0, 0])
        return np.array([y[0] - dr, 0.0, y[1], y[2]])

    def nominal(self, x, t):
        return nominal_orbit_tracker(x, self.params)

    def tracking_error(self, x, t) -> float:
        return radial_tracking_error(x, self.params)

    def psi_values(self, x) -> np.ndarray:
        return np.array([float(c.value(x)) for c in self.safety])

    def time_to_si(self, t) -> float:
        return t * self.params.t_c

    def state_to_si(self, x):
        return redimensionalize(x, self.params)

    def state_from_si(self, x):
        return nondimensionalize(x, self.params)

    def desired_period(self) -> float:
        """Period of the desired ellipse in nondimensional time."""
        pr = self.params
        a = pr.p_d / (1.0 - pr.e_d ** 2) / pr.L_c
        return float(2.0 * np.pi * a ** 1.5)

    def sample_backup_set(self, j: int, n: int, rng) -> np.ndarray:
        """Uniform samples of ``C_j`` (ellipsoid in ``(r, rdot, thetadot)``, any ``theta``)."""
        L = np.linalg.cholesky(self.bank.P[j])
        z = rng.normal(size=(n, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z *= rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / 3.0)
        e = np.linalg.solve(L.T, (np.sqrt(self.bank.gamma[j]) * z).T).T
        y = self.ystar[j] + e
        return np.column_stack([y[:, 0], rng.uniform(0.0, 2.0 * np.pi, n), y[:, 1], y[:, 2]])

    grid_coords = ("r", "theta", "rdot", "thetadot")

    def grid_state(self, base, assign: dict) -> np.ndarray:
        x = np.array(base, dtype=float)
        for name, val in assign.items():
            x[self.grid_coords.index(name)] = val
        return x

    def log_columns(self, p: int) -> list[str]:
        return (["t_s", "r_m", "theta_rad", "rdot_mps", "thetadot_radps", "u1", "u2", "omega", "status", "h_agg"]
                + [f"hI_{j}" for j in range(1, p + 1)] + ["psi1", "psi2", "track_err_m"])

    def log_fields(self, t, x, u) -> tuple[list[float], list[float]]:
        """SI time/state and SI input for the CSV log."""
        return [self.time_to_si(t), *self.state_to_si(x)], list(input_to_si(u, self.params))

    def duration_default(self) -> float:
        return 3.0 * self.desired_period()
