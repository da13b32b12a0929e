import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from combcbf.cbf_core import ContractError
from combcbf.harness import _rk4_zoh
from combcbf.ode_flow import VectorField, integrate_state
from combcbf.scenario_attitude import (AttitudeParams, AttitudeScenario, attitude_dynamics, hat, make_model, pack,
                                       pointing_error_deg, project_rotation, reference, rot_x, rot_y, safety_barrier,
                                       unpack, vee)


@pytest.fixture(scope="module")
def sc():
    return AttitudeScenario()


def random_rotation(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    return Q * np.sign(np.linalg.det(Q))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_hat_vee_round_trip(v):
    v = np.array(v)
    np.testing.assert_array_equal(vee(hat(v)), v)
    np.testing.assert_allclose(hat(v) @ np.array([1.0, -2.0, 0.5]), np.cross(v, [1.0, -2.0, 0.5]), atol=1e-12)


def test_vee_rejects_non_skew():
    with pytest.raises(ContractError):
        vee(np.eye(3))


def test_rest_is_equilibrium():
    np.testing.assert_array_equal(attitude_dynamics(pack(np.eye(3), np.zeros(3)), np.zeros(2)), 0.0)


def test_axial_spin_is_torque_free():
    xd = attitude_dynamics(pack(rot_x(0.3), [0.0, 0.0, 2.0]), np.zeros(2))
    np.testing.assert_allclose(xd[9:], 0.0, atol=1e-15)


def test_axial_rate_is_conserved():
    model = make_model(AttitudeParams())
    field = VectorField(12, model.f, model.df)
    x0 = pack(rot_y(0.4), [0.3, -0.2, 1.1])
    x1 = integrate_state(field, x0, 10.0, 2000)
    assert abs(x1[11] - x0[11]) <= 1e-8
    # transverse rate magnitude is also preserved for an axisymmetric body
    assert abs(np.hypot(*x1[9:11]) - np.hypot(*x0[9:11])) <= 1e-8


def test_model_jacobian_matches_finite_differences():
    model = make_model(AttitudeParams())
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(10):
        x = pack(random_rotation(rng), rng.normal(0, 1, 3))
        fd = np.column_stack([(model.f(x + h * e) - model.f(x - h * e)) / (2 * h) for e in np.eye(12)])
        np.testing.assert_allclose(model.df(x), fd, atol=1e-8)


def test_safety_barrier_values():
    psi = safety_barrier(np.deg2rad(80.0))
    assert psi.value(pack(np.eye(3), np.zeros(3))) == pytest.approx(0.8264, abs=1e-4)
    assert psi.value(pack(rot_x(np.deg2rad(80.0)), np.zeros(3))) == pytest.approx(0.0, abs=1e-12)
    assert psi.value(pack(rot_x(np.deg2rad(85.0)), np.zeros(3))) < 0


def test_pd_vanishes_at_targets(sc):
    half = 0.5 * sc.params.theta_safe
    frames = [np.eye(3), rot_x(half), rot_x(-half), rot_y(half), rot_y(-half)]
    bank = sc.bank
    for j, R in enumerate(frames):
        np.testing.assert_allclose(R[:, 2], bank.targets[j], atol=1e-15)
        X = np.broadcast_to(pack(R, [0.0, 0.0, 0.7]), (bank.p, 12))
        np.testing.assert_allclose(bank.unclamped(X)[j], 0.0, atol=1e-12)
        assert bank.V(X)[j] == pytest.approx(0.0, abs=1e-12)
        assert bank.h(X)[j] == pytest.approx(bank.gamma[j], abs=1e-12)


def test_pd_pushes_axis_toward_target(sc):
    # e3 tilted about x by a positive angle: the torque must tilt it back
    bank = sc.bank.subset([0])
    u = bank.unclamped(pack(rot_x(0.2), np.zeros(3))[None, :])[0]
    assert u[0] < 0 and abs(u[1]) < 1e-12


def test_lyapunov_nonnegative_and_nonincreasing(sc):
    rng = np.random.default_rng(1)
    bank = sc.bank
    for j in range(bank.p):
        sub = bank.subset([j])
        X = sc.sample_backup_set(j, 200, rng)[:, None, :]
        V = sub.V(X)[:, 0]
        assert np.all(V >= 0)
        xdot = sc.model.f(X) + np.einsum("...ai,...i->...a", sc.model.g(X), sub.unclamped(X))
        vdot = np.einsum("...a,...a->...", sub.grad_V(X), xdot)[:, 0]
        np.testing.assert_allclose(vdot, -sub.k_d * (X[:, 0, 9] ** 2 + X[:, 0, 10] ** 2), atol=1e-12)


def test_backup_sets_inside_safe_set_and_unsaturated(sc):
    rng = np.random.default_rng(2)
    cos_safe = np.cos(sc.params.theta_safe)
    for j in range(sc.bank.p):
        X = sc.sample_backup_set(j, 2000, rng)
        assert np.all(X[:, 8] >= cos_safe)
        u = sc.bank.subset([j]).unclamped(X[:, None, :])[:, 0]
        assert np.linalg.norm(u, axis=1).max() <= sc.params.u_radius
        assert np.all(sc.bank.barrier(j).value(X) >= 0)


def test_saturated_jacobian_matches_finite_differences(sc):
    rng = np.random.default_rng(3)
    h = 1e-7
    for _ in range(10):
        x = np.broadcast_to(pack(random_rotation(rng), rng.normal(0, 2, 3)), (sc.bank.p, 12))
        fd = np.stack([(sc.bank.k(x + h * e) - sc.bank.k(x - h * e)) / (2 * h) for e in np.eye(12)], axis=-1)
        np.testing.assert_allclose(sc.bank.dk(x), fd, atol=1e-6)


def test_tracker_is_quiet_on_reference(sc):
    pr = sc.params
    for t in (0.0, 3.0, 7.5):
        Gam, dGam = reference(t, pr)
        # frame with third column Gam and body rates matching dGam
        a = np.cross([1.0, 0.0, 0.0], Gam)
        c1 = a / np.linalg.norm(a)
        R = np.column_stack([c1, np.cross(Gam, c1), Gam])
        v = R.T @ dGam
        x = pack(R, [-v[1], v[0], 0.0])
        np.testing.assert_allclose(sc.nominal(x, t), 0.0, atol=1e-12)
        assert pointing_error_deg(x, t, pr) == pytest.approx(0.0, abs=1e-5)


def test_projection_restores_orthogonality():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = pack(random_rotation(rng) + 1e-3 * rng.standard_normal((3, 3)), rng.normal(0, 1, 3))
        R, _ = unpack(project_rotation(x))
        assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_unfiltered_nominal_leaves_safe_set(sc):
    x, dt = sc.default_x0(), 0.01
    worst = np.inf
    for k in range(3000):
        x = _rk4_zoh(sc.model, x, sc.nominal(x, k * dt), dt, 1, sc.project)
        worst = min(worst, sc.psi_values(x)[0])
    assert worst < 0


def test_params_reject_unknown():
    with pytest.raises(ContractError):
        AttitudeParams.from_dict({"inertia": 3})


def test_grid_state_tilts_axis(sc):
    x = sc.grid_state(sc.default_x0(), {"ax": np.deg2rad(30.0), "w1": 0.2})
    assert x[8] == pytest.approx(np.cos(np.deg2rad(30.0)))
    assert x[9] == 0.2 and x[11] == sc.params.spin
