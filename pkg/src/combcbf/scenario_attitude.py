"""Underactuated axisymmetric satellite with a sun-shield pointing constraint.

The state is the 12-vector ``(R.ravel(), Omega)`` with ``R`` row-major.  Only
the two transverse body torques are actuated, ``B = [e1, e2]``.  Backup
policies are geometric PD laws steering the body symmetry axis
``Gamma = R e3`` to fixed targets on the sphere; their backup sets are
sublevel sets of ``k_p (1 - Gamma_j . Gamma) + 1/2 lambda |Omega_perp|^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

from .backup_cbf import BackupPolicy
from .cbf_core import Barrier, ContractError, ControlAffineModel
from .qp_filter import polytope_from_ball

E3 = np.array([0.0, 0.0, 1.0])


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def vee(S, tol: float = 1e-9):
    S = np.asarray(S, dtype=float)
    if np.abs(S + np.swapaxes(S, -1, -2)).max() > tol:
        raise ContractError("vee of a matrix that is not skew-symmetric")
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pack(R, Omega):
    R = np.asarray(R, dtype=float)
    return np.concatenate([R.reshape(R.shape[:-2] + (9,)), np.asarray(Omega, dtype=float)], axis=-1)


def unpack(x):
    x = np.asarray(x)
    return x[..., :9].reshape(x.shape[:-1] + (3, 3)), x[..., 9:]


def project_rotation(x):
    """Replace the rotation block by its nearest rotation (polar factor)."""
    R, Om = unpack(x)
    U, _, Vt = np.linalg.svd(R)
    Rp = U @ Vt
    flip = np.linalg.det(Rp) < 0
    if np.any(flip):
        U = U.copy()
        U[..., :, 2] = np.where(flip[..., None], -U[..., :, 2], U[..., :, 2])
        Rp = U @ Vt
    return pack(Rp, Om)


@dataclass
class AttitudeParams:
    lam: float = 0.5               # transverse inertia
    lam_hat: float = 1.0           # axial inertia
    u_max: float = 0.5
    theta_safe_deg: float = 80.0
    T: float = 4.0
    k_p: float = 2.0               # backup PD gains
    k_d: float = 1.0
    facets: int = 16
    spin: float = 1.0              # initial axial rate; its momentum limits how fast the axis can be tipped
    gamma: tuple | None = None     # None: calibrate
    calib_samples: int = 10_000
    calib_seed: int = 7
    calib_margin: float = 0.98
    # nominal boundary-circling reference
    circle_rate: float = 2.0 * np.pi / 30.0
    ref_amplitude_deg: float = 10.0
    ref_frequency: float = 2.0 * np.pi / 10.0
    nom_kp: float = 1.0
    nom_kd: float = 1.0

    @property
    def theta_safe(self) -> float:
        return np.deg2rad(self.theta_safe_deg)

    @property
    def J(self):
        return np.diag([self.lam, self.lam, self.lam_hat])

    @property
    def u_radius(self) -> float:
        """Radius of the disk inscribed in the input polygon."""
        return self.u_max * np.cos(np.pi / self.facets)

    def targets(self) -> np.ndarray:
        half = 0.5 * self.theta_safe
        return np.array([E3, rot_x(half) @ E3, rot_x(-half) @ E3, rot_y(half) @ E3, rot_y(-half) @ E3])

    @classmethod
    def from_dict(cls, d: dict) -> "AttitudeParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown attitude parameters: {sorted(unknown)}")
        return cls(**d)


def make_model(params: AttitudeParams) -> ControlAffineModel:
    J = params.J
    Jinv = np.linalg.inv(J)
    gmat = np.zeros((12, 2))
    gmat[9:, :] = Jinv @ np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    basis = hat(np.eye(3))

    def f(x):
        R, Om = unpack(x)
        Rdot = R @ hat(Om)
        JOm = Om @ J
        Omdot = -np.cross(Om, JOm) @ Jinv.T
        return pack(Rdot, Omdot)

    def g(x):
        return np.broadcast_to(gmat, x.shape[:-1] + (12, 2)).copy()

    def df(x):
        R, Om = unpack(x)
        D = np.zeros(x.shape[:-1] + (12, 12))
        blk = -hat(Om)          # d(R hat(Om))[a, b] / dR[a, c] = hat(Om)[c, b]
        for a in range(3):
            D[..., 3 * a:3 * a + 3, 3 * a:3 * a + 3] = blk
        for k in range(3):
            D[..., :9, 9 + k] = (R @ basis[k]).reshape(x.shape[:-1] + (9,))
        JOm = Om @ J
        D[..., 9:, 9:] = -Jinv @ (hat(Om) @ J - hat(JOm))
        return D

    def dg(x):
        return np.zeros(x.shape[:-1] + (12, 2, 12))

    return ControlAffineModel(n=12, m=2, f=f, g=g, df=df, dg=dg)


def attitude_dynamics(x, u, params: AttitudeParams | None = None):
    return make_model(params or AttitudeParams()).xdot(np.asarray(x, float), np.asarray(u, float))


def safety_barrier(theta_safe: float) -> Barrier:
    """``psi = e3' R e3 - cos(theta_safe)``."""
    c = np.cos(theta_safe)

    def value(x):
        return x[..., 8] - c

    def grad(x):
        out = np.zeros(x.shape)
        out[..., 8] = 1.0
        return out

    return Barrier(value, grad)


def saturate_radial(u, radius):
    nrm = np.linalg.norm(u, axis=-1, keepdims=True)
    scale = np.where(nrm > radius, radius / np.where(nrm > 0, nrm, 1.0), 1.0)
    return u * scale


class PdBank:
    """Geometric PD laws driving ``Gamma = R e3`` to ``targets[j]``.

    The torque ``k_p (e3 x R' Gamma_j)_perp - k_d Omega_perp`` makes the
    Lyapunov function ``k_p (1 - Gamma_j . Gamma) + 1/2 lam |Omega_perp|^2``
    decrease at rate ``k_d |Omega_perp|^2``.  Outside the input disk the
    command is scaled back radially.
    """

    def __init__(self, targets, k_p, k_d, lam, u_radius, gamma, ids=None):
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float))
        self.k_p, self.k_d, self.lam, self.u_radius = k_p, k_d, lam, u_radius
        self.gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (len(self.targets),)).copy()
        self.ids = tuple(ids) if ids is not None else tuple(range(1, len(self.targets) + 1))

    @property
    def p(self) -> int:
        return len(self.targets)

    def unclamped(self, x):
        R, Om = unpack(x)
        q = np.einsum("...ac,...a->...c", R, self.targets)
        return np.stack([-self.k_p * q[..., 1], self.k_p * q[..., 0]], axis=-1) - self.k_d * Om[..., :2]

    def _raw_jac(self, x):
        Gam = np.broadcast_to(self.targets, x.shape[:-1] + (3,))
        D = np.zeros(x.shape[:-1] + (2, 12))
        for a in range(3):
            D[..., 0, 3 * a + 1] = -self.k_p * Gam[..., a]
            D[..., 1, 3 * a + 0] = self.k_p * Gam[..., a]
        D[..., 0, 9] = -self.k_d
        D[..., 1, 10] = -self.k_d
        return D

    def k(self, x):
        return saturate_radial(self.unclamped(x), self.u_radius)

    def dk(self, x):
        return self.k_dk(x)[1]

    def k_dk(self, x):
        u = self.unclamped(x)
        D = self._raw_jac(x)
        nrm = np.linalg.norm(u, axis=-1)
        sat = nrm > self.u_radius
        if not np.any(sat):
            return u, D
        safe = np.where(nrm > 0, nrm, 1.0)
        uh = u / safe[..., None]
        proj = (np.eye(2) - uh[..., :, None] * uh[..., None, :]) * (self.u_radius / safe)[..., None, None]
        scale = np.where(sat, self.u_radius / safe, 1.0)
        return u * scale[..., None], np.where(sat[..., None, None], proj @ D, D)

    def V(self, x):
        R, Om = unpack(x)
        Gam = R[..., :, 2]
        return self.k_p * (1.0 - np.einsum("...a,...a->...", self.targets, Gam)) + 0.5 * self.lam * (Om[..., 0] ** 2 + Om[..., 1] ** 2)

    def grad_V(self, x):
        out = np.zeros(x.shape)
        Gam = np.broadcast_to(self.targets, x.shape[:-1] + (3,))
        for a in range(3):
            out[..., 3 * a + 2] = -self.k_p * Gam[..., a]
        out[..., 9] = self.lam * x[..., 9]
        out[..., 10] = self.lam * x[..., 10]
        return out

    def h(self, x):
        return self.gamma - self.V(x)

    def dh(self, x):
        return -self.grad_V(x)

    def policy(self) -> BackupPolicy:
        return BackupPolicy(p=self.p, k=self.k, dk=self.dk, h=self.h, dh=self.dh, gamma=self.gamma,
                            ids=self.ids, project=project_rotation, k_dk=self.k_dk)

    def subset(self, idx) -> "PdBank":
        idx = list(idx)
        return PdBank(self.targets[idx], self.k_p, self.k_d, self.lam, self.u_radius, self.gamma[idx],
                      ids=[self.ids[i] for i in idx])

    def barrier(self, j: int) -> Barrier:
        sub = self.subset([j])
        return Barrier(lambda x: sub.h(x[..., None, :])[..., 0], lambda x: sub.dh(x[..., None, :])[..., 0, :])


# ------------------------------------------------------------ calibration

def _frame_with_axis(Gam):
    """Rotations whose third column is ``Gam`` (batched, arbitrary spin)."""
    a = np.where(np.abs(Gam[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    c1 = np.cross(a, Gam)
    c1 /= np.linalg.norm(c1, axis=-1, keepdims=True)
    c2 = np.cross(Gam, c1)
    return np.stack([c1, c2, Gam], axis=-1)


def sample_backup_set(target, gamma, k_p, lam, n, rng):
    """States with ``V <= gamma`` around ``target`` (rejection from a bounding box)."""
    cosmax = max(1.0 - gamma / k_p, -1.0)
    cb = rng.uniform(cosmax, 1.0, n)
    sb = np.sqrt(1.0 - cb ** 2)
    az = rng.uniform(0.0, 2.0 * np.pi, n)
    base = _frame_with_axis(np.broadcast_to(target, (n, 3)))
    local = np.column_stack([sb * np.cos(az), sb * np.sin(az), cb])
    Gam = np.einsum("nij,nj->ni", base, local)
    spin = rng.uniform(0.0, 2.0 * np.pi, n)
    Rz = np.zeros((n, 3, 3))
    Rz[:, 0, 0] = Rz[:, 1, 1] = np.cos(spin)
    Rz[:, 1, 0] = np.sin(spin)
    Rz[:, 0, 1] = -Rz[:, 1, 0]
    Rz[:, 2, 2] = 1.0
    R = _frame_with_axis(Gam) @ Rz
    wmax = np.sqrt(2.0 * gamma / lam)
    rad = wmax * np.sqrt(rng.uniform(0.0, 1.0, n))
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    Om = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-1.0, 1.0, n)])
    x = pack(R, Om)
    V = k_p * (1.0 - Gam @ target) + 0.5 * lam * (Om[:, 0] ** 2 + Om[:, 1] ** 2)
    return x[V <= gamma]


def calibrate_gamma(params: AttitudeParams, target, n: int | None = None, seed: int | None = None, iters: int = 40) -> float:
    """Largest level whose sampled sublevel set is unsaturated and inside the safe cone."""
    n = n or params.calib_samples
    seed = params.calib_seed if seed is None else seed
    bank = PdBank(target[None, :], params.k_p, params.k_d, params.lam, params.u_radius, 1.0)
    cos_safe = np.cos(params.theta_safe)

    def admissible(gamma):
        rng = np.random.default_rng(seed)
        x = sample_backup_set(target, gamma, params.k_p, params.lam, n, rng)
        if len(x) == 0:
            return True
        u = bank.unclamped(x[:, None, :])[:, 0]
        return bool(np.all(np.linalg.norm(u, axis=-1) <= params.u_radius) and np.all(x[:, 8] >= cos_safe))

    lo, hi = 0.0, 2.0 * params.k_p
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if admissible(mid) else (lo, mid)
    return lo * params.calib_margin


# ------------------------------------------------------------ nominal tracker

def reference(t, params: AttitudeParams):
    """Boundary-circling pointing reference and its time derivative."""
    th = params.theta_safe + np.deg2rad(params.ref_amplitude_deg) * np.sin(params.ref_frequency * t)
    thd = np.deg2rad(params.ref_amplitude_deg) * params.ref_frequency * np.cos(params.ref_frequency * t)
    s, c = np.sin(th), np.cos(th)
    sz, cz = np.sin(params.circle_rate * t), np.cos(params.circle_rate * t)
    Gam = np.array([s * sz, -s * cz, c])
    dGam = thd * np.array([c * sz, -c * cz, -s]) + params.circle_rate * np.array([s * cz, s * sz, 0.0])
    return Gam, dGam


def nominal_boundary_tracker(x, t, params: AttitudeParams):
    R, Om = unpack(x)
    Gam_ref, dGam_ref = reference(t, params)
    q = R.T @ Gam_ref
    v = R.T @ dGam_ref
    w_ref = np.array([-v[1], v[0]])
    u = params.nom_kp * np.array([-q[1], q[0]]) - params.nom_kd * (Om[:2] - w_ref)
    return saturate_radial(u, params.u_radius)


def pointing_error_deg(x, t, params: AttitudeParams) -> float:
    Gam = x[[2, 5, 8]]
    Gam_ref, _ = reference(t, params)
    return float(np.degrees(np.arccos(np.clip(Gam @ Gam_ref, -1.0, 1.0))))


# ------------------------------------------------------------ scenario bundle

@dataclass
class AttitudeScenario:
    params: AttitudeParams = field(default_factory=AttitudeParams)

    name = "attitude"

    @cached_property
    def model(self) -> ControlAffineModel:
        return make_model(self.params)

    @cached_property
    def gamma(self) -> np.ndarray:
        if self.params.gamma is not None:
            return np.broadcast_to(np.asarray(self.params.gamma, dtype=float), (5,)).copy()
        return np.array([calibrate_gamma(self.params, t) for t in self.params.targets()])

    @cached_property
    def bank(self) -> PdBank:
        pr = self.params
        return PdBank(pr.targets(), pr.k_p, pr.k_d, pr.lam, pr.u_radius, self.gamma)

    @cached_property
    def safety(self) -> list[Barrier]:
        return [safety_barrier(self.params.theta_safe)]

    @cached_property
    def inputs(self):
        return polytope_from_ball(self.params.u_max, self.params.facets)

    @property
    def T(self) -> float:
        return self.params.T

    single_index = 0  # the e3-centered set

    def explicit_barriers(self, idx=None) -> list[Barrier]:
        idx = range(self.bank.p) if idx is None else idx
        return [self.bank.barrier(j) for j in idx]

    def default_x0(self) -> np.ndarray:
        return pack(np.eye(3), [0.0, 0.0, self.params.spin])

    def project(self, x):
        return project_rotation(x)

    def nominal(self, x, t):
        return nominal_boundary_tracker(x, t, self.params)

    def tracking_error(self, x, t) -> float:
        return pointing_error_deg(x, t, self.params)

    def psi_values(self, x) -> np.ndarray:
        return np.array([float(c.value(x)) for c in self.safety])

    def sample_backup_set(self, j: int, n: int, rng) -> np.ndarray:
        pr = self.params
        out = np.zeros((0, 12))
        while len(out) < n:
            out = np.vstack([out, sample_backup_set(self.bank.targets[j], self.gamma[j], pr.k_p, pr.lam, n, rng)])
        return out[:n]

    grid_coords = ("ax", "ay", "w1", "w2", "w3")

    def grid_state(self, base, assign: dict) -> np.ndarray:
        """Tilt the symmetry axis by ``R_x(ax) R_y(ay)``; rates override ``Omega``."""
        R, Om = unpack(np.asarray(base, dtype=float))
        Om = Om.copy()
        R = rot_x(assign.get("ax", 0.0)) @ rot_y(assign.get("ay", 0.0)) @ R
        for k, name in enumerate(("w1", "w2", "w3")):
            if name in assign:
                Om[k] = assign[name]
        return pack(R, Om)

    def log_columns(self, p: int) -> list[str]:
        return (["t"] + [f"R{a}{b}" for a in range(1, 4) for b in range(1, 4)] + ["w1", "w2", "w3"]
                + ["u1", "u2", "omega", "status", "h_agg"] + [f"hI_{j}" for j in range(1, p + 1)]
                + ["psi1", "angle_deg"])

    def log_fields(self, t, x, u) -> tuple[list[float], list[float]]:
        return [t, *x], list(u)

    def duration_default(self) -> float:
        return 60.0
