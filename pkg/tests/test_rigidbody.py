import numpy as np
import pytest
from scipy.linalg import expm

from nutbot import rigidbody as rb
from nutbot.spatial import rotvec_from_matrix, skew


@pytest.fixture(scope="module")
def model():
    return rb.default_model()


def random_q(model, rng, shrink=0.95):
    return rng.uniform(model.lower * shrink, model.upper * shrink)


def test_zero_configuration_matches_hand_composition(model):
    T = np.eye(4)
    for X in model.X_fixed:
        T = T @ X
    T = T @ model.tool
    X_WG = rb.forward_kinematics(model, np.zeros(7))
    assert np.allclose(X_WG.matrix(), T, atol=1e-12)
    # straight-up arm: G sits on the base axis at the summed link lengths
    assert np.allclose(X_WG.translation, [0.0, 0.0, 1.506], atol=1e-9)


def test_forward_kinematics_matches_product_of_exponentials(model):
    # space-frame screw axes read off the zero configuration
    R0, p0 = rb.link_frames(model, np.zeros(7))
    screws = []
    for i in range(7):
        w = R0[i] @ model.axes[i]
        v = -np.cross(w, p0[i])
        S = np.zeros((4, 4))
        S[:3, :3] = skew(w)
        S[:3, 3] = v
        screws.append(S)
    M = rb.forward_kinematics(model, np.zeros(7)).matrix()
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = random_q(model, rng)
        T = np.eye(4)
        for S, qi in zip(screws, q):
            T = T @ expm(S * qi)
        assert np.allclose(T @ M, rb.forward_kinematics(model, q).matrix(), atol=1e-10)


def test_jacobian_matches_central_differences(model):
    rng = np.random.default_rng(4)
    h = 1e-6
    for _ in range(25):
        q = random_q(model, rng)
        J = rb.jacobian(model, q)
        for j in range(7):
            dq = np.zeros(7)
            dq[j] = h
            Xp = rb.forward_kinematics(model, q + dq)
            Xm = rb.forward_kinematics(model, q - dq)
            w = rotvec_from_matrix(Xp.rotation @ Xm.rotation.T) / (2 * h)
            v = (Xp.translation - Xm.translation) / (2 * h)
            assert np.allclose(J[:3, j], w, atol=1e-6)
            assert np.allclose(J[3:, j], v, atol=1e-6)


def test_jacobian_in_a_frame_rotates_rows(model):
    q = np.array([0.3, -0.4, 0.2, -1.1, 0.5, 0.7, -0.2])
    frame = rb.forward_kinematics(model, q)
    Jf = rb.jacobian(model, q, frame)
    Jw = rb.jacobian(model, q)
    R = frame.rotation
    assert np.allclose(R @ Jf[:3], Jw[:3])
    assert np.allclose(R @ Jf[3:], Jw[3:])


def test_mass_matrix_symmetric_positive_definite(model):
    rng = np.random.default_rng(5)
    for _ in range(200):
        M = rb.mass_matrix(model, random_q(model, rng))
        assert np.abs(M - M.T).max() < 1e-10
        assert np.linalg.eigvalsh(M).min() > 0


def _link_com_positions(model, q):
    R, p = rb.link_frames(model, q)
    return [p[i] + R[i] @ model.coms[i] for i in range(7)], R


def test_kinetic_energy_matches_link_sum(model):
    """0.5 qd^T M qd against per-link energies from differentiated poses."""
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(10):
        q = random_q(model, rng)
        qd = rng.uniform(-1, 1, 7)
        cp, Rp = _link_com_positions(model, q + h * qd)
        cm, Rm = _link_com_positions(model, q - h * qd)
        _, R = _link_com_positions(model, q)
        E = 0.0
        for i in range(7):
            v = (cp[i] - cm[i]) / (2 * h)
            w = rotvec_from_matrix(Rp[i] @ Rm[i].T) / (2 * h)
            I_w = R[i] @ model.inertias[i] @ R[i].T
            E += 0.5 * model.masses[i] * v @ v + 0.5 * w @ I_w @ w
        M = rb.mass_matrix(model, q)
        assert 0.5 * qd @ M @ qd == pytest.approx(E, rel=1e-6)


def test_gravity_torque_is_potential_gradient(model):
    g = model.gravity

    def potential(q):
        c, _ = _link_com_positions(model, q)
        return -sum(m * (g @ ci) for m, ci in zip(model.masses, c))

    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(10):
        q = random_q(model, rng)
        grad = np.array([(potential(q + h * e) - potential(q - h * e)) / (2 * h) for e in np.eye(7)])
        assert np.allclose(rb.gravity_torque(model, q), grad, atol=1e-6)


def test_forward_and_inverse_dynamics_round_trip(model):
    rng = np.random.default_rng(8)
    for _ in range(20):
        q = random_q(model, rng)
        qd = rng.uniform(-1, 1, 7)
        tau = rng.uniform(-20, 20, 7)
        qdd = rb.forward_dynamics(model, q, qd, tau)
        assert np.allclose(rb.inverse_dynamics(model, q, qd, qdd), tau, atol=1e-9)


def test_bias_forces_quadratic_in_velocity(model):
    q = np.array([0.2, 0.5, -0.3, -1.0, 0.4, 0.9, 0.1])
    qd = np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6])
    g = rb.gravity_torque(model, q)
    c1 = rb.bias_forces(model, q, qd) - g
    c2 = rb.bias_forces(model, q, 2 * qd) - g
    assert np.allclose(c2, 4 * c1, atol=1e-10)


def test_jacobian_dot_qdot_matches_differentiated_jacobian(model):
    rng = np.random.default_rng(9)
    h = 1e-6
    for _ in range(10):
        q = random_q(model, rng)
        qd = rng.uniform(-1, 1, 7)
        Jdot = (rb.jacobian(model, q + h * qd) - rb.jacobian(model, q - h * qd)) / (2 * h)
        assert np.allclose(rb.jacobian_dot_qdot(model, q, qd), Jdot @ qd, atol=1e-6)


def test_unforced_energy_drift_small(model):
    m = model.with_gravity(np.zeros(3))
    q = np.array([0.3, 0.6, -0.4, -1.2, 0.5, 0.8, 0.0])
    qd = np.array([0.4, -0.3, 0.2, 0.5, -0.4, 0.3, 0.2])
    E0 = 0.5 * qd @ rb.mass_matrix(m, q) @ qd
    dt = 1e-4
    for _ in range(10000):
        qd = qd + dt * rb.forward_dynamics(m, q, qd, np.zeros(7))
        q = q + dt * qd
    E1 = 0.5 * qd @ rb.mass_matrix(m, q) @ qd
    assert abs(E1 - E0) / E0 < 1e-3


def test_model_arrays_are_read_only(model):
    with pytest.raises(ValueError):
        model.masses[0] = 1.0


def test_parse_rejects_missing_and_malformed_keys():
    with pytest.raises(ValueError, match="missing"):
        rb.parse_model("gravity = 0 0 -9.81\n")
    with pytest.raises(ValueError, match="malformed"):
        rb.parse_model("joint.1.axis 0 0 1\n")


def test_within_limits(model):
    assert model.within_limits(np.zeros(7))
    q = np.zeros(7)
    q[1] = 2.5
    assert not model.within_limits(q)
