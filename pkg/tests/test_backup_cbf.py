import numpy as np
import pytest

from combcbf.backup_cbf import (BackupPolicy, RowSet, aggregated_value, assemble_implicit_constraints,
                                eval_implicit_cbf, eval_implicit_cbfs, membership, single_backup_rows)
from combcbf.cbf_core import Barrier, ClassKappaE, ContractError, ControlAffineModel, ScaleFunction
from combcbf.scenario_orbit import OrbitScenario

# xdot = u on the real line
INTEGRATOR = ControlAffineModel(
    n=1, m=1,
    f=lambda x: np.zeros_like(x),
    g=lambda x: np.ones(np.shape(x) + (1,)),
    df=lambda x: np.zeros(np.shape(x) + (1,)),
    dg=lambda x: np.zeros(np.shape(x) + (1, 1)),
)
PSI = Barrier(lambda x: x[..., 0], lambda x: np.ones_like(x))


def decay_policy(offset=0.1, p=1):
    """Backup ``u = -x`` with terminal barrier ``h = x - offset``."""
    return BackupPolicy(
        p=p,
        k=lambda X: -X,
        dk=lambda X: -np.ones(X.shape + (1,)),
        h=lambda X: X[..., 0] - offset,
        dh=lambda X: np.ones_like(X),
        gamma=np.full(p, offset),
    )


def test_decay_flow_closed_form():
    ev = eval_implicit_cbf(INTEGRATOR, decay_policy(), PSI, np.array([1.0]), T=1.0, N=10)
    tau = np.linspace(0.1, 1.0, 10)
    np.testing.assert_allclose(ev.tau, tau, atol=1e-15)
    np.testing.assert_allclose(ev.psi_values[:, 0], np.exp(-tau), atol=1e-6)
    np.testing.assert_allclose(ev.psi_grads[:, 0, 0], np.exp(-tau), atol=1e-6)
    assert abs(ev.terminal_value - (np.exp(-1.0) - 0.1)) < 1e-6
    assert abs(ev.value - 0.2679) < 1e-4
    assert ev.policy_id == 1


def test_start_sample_is_optional():
    ev = eval_implicit_cbf(INTEGRATOR, decay_policy(), PSI, np.array([1.0]), 1.0, 10, include_start=True)
    assert ev.psi_values.shape == (11, 1)
    assert ev.psi_values[0, 0] == 1.0
    assert len(ev.all_values()) == 12


def test_stationary_flow():
    still = ControlAffineModel(
        n=2, m=1,
        f=lambda x: np.zeros_like(x),
        g=lambda x: np.zeros(np.shape(x) + (1,)),
        df=lambda x: np.zeros(np.shape(x) + (2,)),
        dg=lambda x: np.zeros(np.shape(x) + (1, 2)),
    )
    ball = Barrier(lambda x: 1.0 - np.sum(x * x, axis=-1), lambda x: -2.0 * x)
    pol = BackupPolicy(p=1, k=lambda X: np.zeros(X.shape[:-1] + (1,)), dk=lambda X: np.zeros(X.shape[:-1] + (1, 2)),
                       h=lambda X: 0.5 - X[..., 0], dh=lambda X: np.broadcast_to([-1.0, 0.0], X.shape),
                       gamma=np.array([0.5]))
    ev = eval_implicit_cbf(still, pol, ball, np.zeros(2), 1.0, 5)
    np.testing.assert_array_equal(ev.psi_values, 1.0)
    assert ev.value == 0.5


def test_bank_matches_single_policies():
    offsets = np.array([0.1, 0.4, 0.7])
    bank = BackupPolicy(p=3, k=lambda X: -X, dk=lambda X: -np.ones(X.shape + (1,)),
                        h=lambda X: X[..., 0] - offsets, dh=lambda X: np.ones_like(X), gamma=offsets)
    evals = eval_implicit_cbfs(INTEGRATOR, bank, PSI, np.array([1.0]), 1.0, 10)
    assert [e.policy_id for e in evals] == [1, 2, 3]
    for e, off in zip(evals, offsets):
        single = eval_implicit_cbf(INTEGRATOR, decay_policy(off), PSI, np.array([1.0]), 1.0, 10)
        assert e.value == pytest.approx(single.value, abs=1e-15)


def test_aggregated_value_and_membership():
    evals = eval_implicit_cbfs(INTEGRATOR, decay_policy(p=1), PSI, np.array([1.0]), 1.0, 10)
    assert aggregated_value(evals) == evals[0].value
    inside, margin = membership(np.array([1.0]), evals)
    assert inside and margin == evals[0].value
    with pytest.raises(ContractError):
        aggregated_value([])


def test_single_policy_rows_match_single_backup_rows():
    x = np.array([1.0])
    ev = eval_implicit_cbf(INTEGRATOR, decay_policy(), PSI, x, 1.0, 10)
    rho = ScaleFunction("absolute")
    agg = assemble_implicit_constraints([ev], ev.value, ClassKappaE(), rho, INTEGRATOR, x)
    single = single_backup_rows(ev, INTEGRATOR, x)
    assert len(agg) == len(single) == 11
    np.testing.assert_allclose(agg.a, single.a, atol=1e-12)
    np.testing.assert_allclose(agg.b, single.b, atol=1e-12)
    np.testing.assert_allclose(agg.v, single.v, atol=1e-12)
    # gaps vanish exactly on the rows attaining the minimum
    np.testing.assert_allclose(agg.d, rho(agg.v - ev.value))
    assert agg.d[np.argmin(agg.v)] == 0.0


def test_rowset_concat_and_slack():
    r1 = RowSet(a=np.array([[1.0]]), b=np.array([0.0]), v=np.array([0.5]), d=np.array([0.0]))
    r2 = RowSet(a=np.array([[-1.0]]), b=np.array([1.0]), v=np.array([0.0]), d=np.array([2.0]))
    rows = RowSet.concat([r1, r2])
    assert len(rows) == 2 and [r.d for r in rows] == [0.0, 2.0]
    np.testing.assert_allclose(rows.slack(np.array([0.5]), 0.25, ClassKappaE()), [1.0, 1.0])


@pytest.fixture(scope="module")
def orbit():
    return OrbitScenario()


def test_orbit_row_count(orbit):
    evals = eval_implicit_cbfs(orbit.model, orbit.bank.policy(), orbit.safety, orbit.default_x0(), orbit.T, 50)
    rows = assemble_implicit_constraints(evals, aggregated_value(evals), ClassKappaE(), ScaleFunction(),
                                         orbit.model, orbit.default_x0())
    assert len(rows) == orbit.bank.p * (50 * 2 + 1)


def test_orbit_pullback_gradients_match_finite_differences(orbit):
    rng = np.random.default_rng(1)
    policy, h = orbit.bank.policy(), 1e-6
    worst = 0.0
    for j in rng.integers(0, orbit.bank.p, 10):
        x = orbit.sample_backup_set(int(j), 1, rng)[0]
        ev = eval_implicit_cbfs(orbit.model, policy, orbit.safety, x, orbit.T, 20)
        grads = np.vstack([e.all_grads() for e in ev])
        fd = np.empty_like(grads)
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            up = np.concatenate([v.all_values() for v in eval_implicit_cbfs(orbit.model, policy, orbit.safety, x + e, orbit.T, 20)])
            dn = np.concatenate([v.all_values() for v in eval_implicit_cbfs(orbit.model, policy, orbit.safety, x - e, orbit.T, 20)])
            fd[:, i] = (up - dn) / (2 * h)
        worst = max(worst, np.linalg.norm(grads - fd) / np.linalg.norm(fd))
    assert worst <= 1e-4


def test_membership_agrees_with_per_sample_check(orbit):
    rng = np.random.default_rng(2)
    policy = orbit.bank.policy()
    base = orbit.default_x0()
    for _ in range(20):
        x = base + rng.normal(0, [0.3, 0.0, 0.1, 0.05])
        evals = eval_implicit_cbfs(orbit.model, policy, orbit.safety, x, orbit.T, 20)
        brute = any(np.all(e.psi_values >= 0) and e.terminal_value >= 0 for e in evals)
        assert membership(x, evals)[0] == brute
