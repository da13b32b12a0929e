"""Closed-loop simulation driver, configuration, metrics and file exports."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .backup_cbf import RowSet, aggregated_value, assemble_implicit_constraints, eval_implicit_cbfs, single_backup_rows
from .cbf_core import ClassKappaE, CompositeSpec, ContractError, ScaleFunction, bundle_from_barriers
from .compatibility import CompatibilityReport, compatibility_margin
from .qp_filter import (FilterResult, Status, filter_aggregated_implicit, filter_backup_single,
                        filter_gen_combinatorial, filter_standard)
from .scenario_attitude import AttitudeParams, AttitudeScenario
from .scenario_orbit import OrbitParams, OrbitScenario, OrbitSingularity

log = logging.getLogger(__name__)

VARIANTS = ("cbf", "comb", "bcbf", "comb-bcbf")
SCENARIOS = ("attitude", "orbit")
DEFAULT_N = {"attitude": 40, "orbit": 50}
DEFAULT_DT = {"attitude": 0.02, "orbit": 0.064}
# the relaxation gaps rho(h_j - h) are a few hundredths in both scenarios, so a
# heavy omega weight pins the aggregated filter to the intersection of the sets
DEFAULT_C_OMEGA = {"attitude": 0.01, "orbit": 0.01}


@dataclass
class ScenarioConfig:
    """Run configuration.  Times and states use the scenario's internal units
    (nondimensional for both scenarios); ``params`` uses each scenario's own
    parameter names and units."""

    scenario: str = "attitude"
    variant: str = "comb-bcbf"
    params: dict = field(default_factory=dict)
    N: int | None = None
    dt_ctrl: float | None = None
    duration: float | None = None
    x0: list | None = None
    backup_sets: list | None = None
    seed: int = 0
    tol: float = 1e-10
    max_iter: int = 500
    c_omega: float | None = None
    alpha: float = 1.0
    rho: str = "absolute"
    substeps: int = 4
    safety_tol: float = 1e-3
    include_start: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractError(f"unknown scenario {self.scenario!r}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.N is None:
            self.N = DEFAULT_N[self.scenario]
        if self.dt_ctrl is None:
            self.dt_ctrl = DEFAULT_DT[self.scenario]
        if self.c_omega is None:
            self.c_omega = DEFAULT_C_OMEGA[self.scenario]
        if not self.c_omega > 0:
            raise ContractError("c_omega must be positive")
        if not int(self.N) == self.N or self.N < 1:
            raise ContractError("N must be a positive integer")
        if not self.dt_ctrl > 0:
            raise ContractError("dt_ctrl must be positive")
        if self.substeps < 4:
            raise ContractError("at least 4 plant substeps per control period")
        if self.duration is not None and self.duration < 0:
            raise ContractError("duration must be nonnegative")
        ScaleFunction(self.rho)
        ClassKappaE(self.alpha)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ContractError(f"bad config value: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ContractError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


def make_scenario(cfg: ScenarioConfig):
    try:
        if cfg.scenario == "attitude":
            return AttitudeScenario(AttitudeParams.from_dict(cfg.params))
        return OrbitScenario(OrbitParams.from_dict(cfg.params))
    except TypeError as exc:
        raise ContractError(f"bad scenario parameter: {exc}") from exc


# ------------------------------------------------------------ safety filter

@dataclass
class StepResult:
    u: np.ndarray
    omega: float
    status: Status
    h_values: np.ndarray
    h_agg: float
    result: FilterResult | None = None


class SafetyFilter:
    """Evaluates the configured filter variant at a state."""

    def __init__(self, scenario, cfg: ScenarioConfig):
        self.scenario, self.cfg = scenario, cfg
        self.alpha = ClassKappaE(cfg.alpha)
        self.rho = ScaleFunction(cfg.rho)
        single = cfg.variant in ("cbf", "bcbf")
        if cfg.backup_sets is not None:
            idx = [int(j) for j in cfg.backup_sets]
            p_all = scenario.bank.p
            if not idx or any(not 0 <= j < p_all for j in idx):
                raise ContractError(f"backup set indices must lie in 0..{p_all - 1}")
        else:
            idx = [scenario.single_index] if single else list(range(scenario.bank.p))
        if cfg.variant == "bcbf" and len(idx) != 1:
            raise ContractError("the single-backup variant takes exactly one backup set")
        self.idx = idx
        self.barriers = scenario.explicit_barriers(idx)
        self.bank = scenario.bank.subset(idx)
        self.policy = self.bank.policy()
        # several explicit sets under the standard filter mean their intersection
        self.spec = CompositeSpec(r=len(idx)) if cfg.variant == "cbf" else CompositeSpec(r=1)

    @property
    def p(self) -> int:
        return len(self.idx)

    def implicit_values(self, x) -> np.ndarray:
        evals = eval_implicit_cbfs(self.scenario.model, self.policy, self.scenario.safety, x, self.scenario.T, self.cfg.N,
                                   self.cfg.include_start)
        return np.array([e.value for e in evals])

    def __call__(self, x, kd) -> StepResult:
        sc, cfg, model = self.scenario, self.cfg, self.scenario.model
        opts = dict(tol=cfg.tol, max_iter=cfg.max_iter)
        if cfg.variant in ("cbf", "comb"):
            bundle = bundle_from_barriers(model, self.barriers, x, self.spec)
            if cfg.variant == "cbf":
                res = filter_standard(kd, bundle, self.alpha, sc.inputs, **opts)
            else:
                res = filter_gen_combinatorial(kd, bundle, bundle.composite, self.alpha, self.rho, cfg.c_omega,
                                               sc.inputs, **opts)
            return StepResult(res.u, res.omega, res.status, bundle.values.copy(), bundle.composite, res)
        evals = eval_implicit_cbfs(model, self.policy, sc.safety, x, sc.T, cfg.N, cfg.include_start)
        h_agg = aggregated_value(evals)
        values = np.array([e.value for e in evals])
        if cfg.variant == "bcbf":
            res = filter_backup_single(kd, single_backup_rows(evals[0], model, x), self.alpha, sc.inputs, **opts)
        else:
            rows = assemble_implicit_constraints(evals, h_agg, self.alpha, self.rho, model, x)
            res = filter_aggregated_implicit(kd, rows, self.alpha, cfg.c_omega, sc.inputs, **opts)
        return StepResult(res.u, res.omega, res.status, values, h_agg, res)


# ------------------------------------------------------------ simulation

@dataclass
class Metrics:
    variant: str = ""
    steps: int = 0
    mean_tracking_error: float = math.nan
    max_tracking_error: float = math.nan
    min_h_agg: float = math.nan
    min_psi: list = field(default_factory=list)
    max_input_norm: float = 0.0
    max_input_violation: float = -math.inf
    nonoptimal_steps: int = 0
    aborted: str = ""
    wall_time_s: float = 0.0

    def safe(self, tol: float) -> bool:
        return bool(self.min_psi) and min(self.min_psi) >= -tol


@dataclass
class SimLog:
    scenario: str
    variant: str
    p: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    status: list = field(default_factory=list)
    h_values: list = field(default_factory=list)
    h_agg: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    tracking_error: list = field(default_factory=list)
    held: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    metrics: Metrics = field(default_factory=Metrics)

    def __len__(self) -> int:
        return len(self.t)


def _rk4_zoh(model, x, u, dt, substeps, project):
    h = dt / substeps
    for _ in range(substeps):
        k1 = model.xdot(x, u)
        k2 = model.xdot(x + 0.5 * h * k1, u)
        k3 = model.xdot(x + 0.5 * h * k2, u)
        k4 = model.xdot(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if project is not None:
            x = project(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("plant state became non-finite")
    return x


def compute_metrics(logd: SimLog, inputs, wall: float = 0.0, aborted: str = "") -> Metrics:
    m = Metrics(variant=logd.variant, steps=len(logd), aborted=aborted, wall_time_s=wall)
    if len(logd) == 0:
        return m
    err = np.asarray(logd.tracking_error)
    m.mean_tracking_error = float(err.mean())
    m.max_tracking_error = float(err.max())
    m.min_h_agg = float(np.min(logd.h_agg))
    m.min_psi = [float(v) for v in np.min(np.asarray(logd.psi), axis=0)]
    U = np.asarray(logd.u)
    m.max_input_norm = float(np.linalg.norm(U, axis=1).max())
    m.max_input_violation = float((U @ inputs.A.T - inputs.b).max())
    m.nonoptimal_steps = int(sum(s != Status.OPTIMAL.value for s in logd.status))
    return m


def _step_count(duration: float, dt: float) -> int:
    n = duration / dt
    return int(round(n)) if abs(n - round(n)) < 1e-9 * max(1.0, n) else int(math.floor(n))


def run_closed_loop(cfg: ScenarioConfig, scenario=None, keep_rows: bool = False) -> SimLog:
    """Zero-order-hold closed loop: filter at each control step, hold ``u`` over
    ``dt_ctrl`` and integrate the plant with ``cfg.substeps`` RK4 substeps.

    A non-optimal filter step holds the previous input and is marked in the log.
    Plant singularities and non-finite values end the run early with the
    reason recorded in ``metrics.aborted``.
    """
    sc = scenario if scenario is not None else make_scenario(cfg)
    filt = SafetyFilter(sc, cfg)
    duration = cfg.duration if cfg.duration is not None else sc.duration_default()
    n_steps = _step_count(duration, cfg.dt_ctrl)
    project = getattr(sc, "project", None)
    x = np.array(cfg.x0 if cfg.x0 is not None else sc.default_x0(), dtype=float)
    if x.shape != (sc.model.n,):
        raise ContractError(f"initial state must have {sc.model.n} entries")
    if project is not None:
        x = project(x)
    out = SimLog(scenario=cfg.scenario, variant=cfg.variant, p=filt.p)
    u_prev = np.zeros(sc.model.m)
    aborted = ""
    start = time.perf_counter()
    for k in range(n_steps + 1):
        t = k * cfg.dt_ctrl
        try:
            step = filt(x, sc.nominal(x, t))
        except (FloatingPointError, OrbitSingularity) as exc:
            aborted = f"t={t:.6g}: {exc}"
            log.error("run aborted at %s", aborted)
            break
        held = step.status is not Status.OPTIMAL
        u = u_prev if held else step.u
        if held:
            log.info("t=%.6g: filter status %s, holding previous input", t, step.status.value)
        out.t.append(t)
        out.x.append(x.copy())
        out.u.append(np.array(u, dtype=float))
        out.omega.append(step.omega)
        out.status.append(step.status.value)
        out.h_values.append(step.h_values)
        out.h_agg.append(step.h_agg)
        out.psi.append(sc.psi_values(x))
        out.tracking_error.append(sc.tracking_error(x, t))
        out.held.append(held)
        if keep_rows and step.result is not None:
            out.rows.append((step.result.problem, np.r_[step.result.u, step.result.omega] if step.result.problem.has_omega else step.result.u))
        if k == n_steps:
            break
        try:
            x = _rk4_zoh(sc.model, x, u, cfg.dt_ctrl, cfg.substeps, project)
        except (FloatingPointError, OrbitSingularity) as exc:
            aborted = f"t={t:.6g}: {exc}"
            log.error("run aborted at %s", aborted)
            break
        u_prev = u
    out.metrics = compute_metrics(out, sc.inputs, time.perf_counter() - start, aborted)
    return out


def replay_slack(logd: SimLog) -> float:
    """Smallest constraint slack of the logged solutions on optimal rows."""
    worst = math.inf
    for (prob, z), status in zip(logd.rows, logd.status):
        if status != Status.OPTIMAL.value or len(prob.d) == 0:
            continue
        worst = min(worst, float((prob.d - prob.G @ z).min()))
    return worst


def compare_variants(cfg: ScenarioConfig, variants: Sequence[str | dict]) -> list[tuple[SimLog, Metrics]]:
    """Run each variant from the same config.  Entries are variant names or
    dicts of config overrides (e.g. ``{"variant": "bcbf", "backup_sets": [0]}``)."""
    out = []
    base = cfg.to_dict()
    for v in variants:
        over = {"variant": v} if isinstance(v, str) else dict(v)
        run_cfg = ScenarioConfig.from_dict({**base, **over})
        logd = run_closed_loop(run_cfg)
        out.append((logd, logd.metrics))
    return out


# ------------------------------------------------------------ exports

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return format(float(v), ".12g")


def export_csv(logd: SimLog, path, scenario) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(scenario.log_columns(logd.p))
            for i in range(len(logd)):
                head, u = scenario.log_fields(logd.t[i], logd.x[i], logd.u[i])
                row = [*head, *u, logd.omega[i], logd.status[i], logd.h_agg[i], *logd.h_values[i],
                       *logd.psi[i], logd.tracking_error[i]]
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write log to {path}: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def export_json(obj, path) -> None:
    if isinstance(obj, Metrics):
        obj = asdict(obj)
    elif isinstance(obj, CompatibilityReport):
        obj = obj.to_dict()
    elif isinstance(obj, list) and obj and isinstance(obj[0], Metrics):
        obj = [asdict(m) for m in obj]
    path = Path(path)
    try:
        path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------ grid export

@dataclass
class SliceSpec:
    """Two named coordinates swept over ``[lo, hi]``; everything else from ``base``."""

    names: tuple[str, str]
    ranges: tuple[tuple[float, float], tuple[float, float]]
    text: str = ""

    @classmethod
    def parse(cls, text: str, coords: Sequence[str]) -> "SliceSpec":
        """``"name=lo:hi,name=lo:hi"``, e.g. ``"r=3.5:5,rdot=-0.2:0.2"``."""
        try:
            parts = [p.split("=") for p in text.split(",")]
            names = tuple(n.strip() for n, _ in parts)
            ranges = tuple(tuple(float(v) for v in r.split(":")) for _, r in parts)
        except ValueError as exc:
            raise ContractError(f"bad slice spec {text!r}") from exc
        if len(names) != 2 or any(len(r) != 2 for r in ranges):
            raise ContractError("slice spec needs exactly two name=lo:hi entries")
        for n in names:
            if n not in coords:
                raise ContractError(f"unknown slice coordinate {n!r}; choose from {list(coords)}")
        return cls(names, ranges, text)


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        W, H = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ContractError(f"bad resolution {text!r}, expected WxH") from exc
    if W < 1 or H < 1:
        raise ContractError("resolution must be positive")
    return W, H


def _axis(lo, hi, n):
    return np.array([0.5 * (lo + hi)]) if n == 1 else np.linspace(lo, hi, n)


def grid_rows(cfg: ScenarioConfig, spec: SliceSpec, res: tuple[int, int], scenario=None):
    """Yield ``(x1, x2, h_1..h_p, hIfin_1..hIfin_p, h_agg)`` in row-major order."""
    sc = scenario if scenario is not None else make_scenario(cfg)
    filt = SafetyFilter(sc, ScenarioConfig.from_dict({**cfg.to_dict(), "variant": "comb-bcbf"}))
    base = np.array(cfg.x0 if cfg.x0 is not None else sc.default_x0(), dtype=float)
    W, H = res
    xs = _axis(*spec.ranges[0], W)
    ys = _axis(*spec.ranges[1], H)
    for y in ys:
        for x1 in xs:
            x = sc.grid_state(base, {spec.names[0]: x1, spec.names[1]: y})
            h = np.array([float(b.value(x)) for b in filt.barriers])
            try:
                hI = filt.implicit_values(x)
            except (FloatingPointError, OrbitSingularity):
                hI = np.full(filt.p, np.nan)
            yield [x1, y, *h, *hI, float(np.max(hI))]


def export_grid(cfg: ScenarioConfig, spec: SliceSpec, res: tuple[int, int], path, scenario=None) -> int:
    path = Path(path)
    n = 0
    sc = scenario if scenario is not None else make_scenario(cfg)
    p = len(cfg.backup_sets) if cfg.backup_sets is not None else sc.bank.p
    cols = ["x1", "x2"] + [f"h_{j}" for j in range(1, p + 1)] + [f"hIfin_{j}" for j in range(1, p + 1)] + ["h_agg"]
    try:
        with path.open("w") as fh:
            fh.write(f"# scenario={cfg.scenario} slice={spec.text} res={res[0]}x{res[1]} columns={','.join(cols)}\n")
            for row in grid_rows(cfg, spec, res, sc):
                fh.write(",".join(_fmt(v) for v in row) + "\n")
                n += 1
    except OSError as exc:
        raise OSError(f"cannot write grid to {path}: {exc}") from exc
    return n


# ------------------------------------------------------------ compatibility audit

def audit_backup_union(cfg: ScenarioConfig, samples: int, scenario=None) -> tuple[CompatibilityReport, int]:
    """Compatibility audit over the union of the explicit backup sets.

    Samples are drawn round-robin from the sets.  Also counts states with a
    positive margin where the gen-combinatorial filter is not optimal.
    """
    sc = scenario if scenario is not None else make_scenario(cfg)
    rng = np.random.default_rng(cfg.seed)
    idx = cfg.backup_sets if cfg.backup_sets is not None else list(range(sc.bank.p))
    barriers = sc.explicit_barriers(idx)
    alpha, rho = ClassKappaE(cfg.alpha), ScaleFunction(cfg.rho)
    spec = CompositeSpec(r=1)
    per = [sc.sample_backup_set(j, -(-samples // len(idx)), rng) for j in idx]
    report = CompatibilityReport(scenario=cfg.scenario, sampler=f"union of backup sets {list(idx)}, seed {cfg.seed}")
    exceptions = 0
    for i in range(samples):
        x = per[i % len(idx)][i // len(idx)]
        bundle = bundle_from_barriers(sc.model, barriers, x, spec)
        margin = compatibility_margin(x, bundle, alpha, sc.inputs)
        report.add(x, margin)
        if margin > 0:
            res = filter_gen_combinatorial(sc.nominal(x, 0.0), bundle, bundle.composite, alpha, rho, cfg.c_omega,
                                           sc.inputs, tol=cfg.tol, max_iter=cfg.max_iter)
            exceptions += res.status is not Status.OPTIMAL
    return report, exceptions
