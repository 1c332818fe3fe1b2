import numpy as np
import pytest

from nutbot import rigidbody as rb
from nutbot.control import (
    ControlMode, Gains, TaskCoordinates, ft_project, hybrid_torques, null_space_projector,
    pseudoinverse, select_controller, stiffness_torques,
)
from nutbot.planner import Stage, StageTag
from nutbot.spatial import Pose, axis_angle, skew
from nutbot.world import Wrench


def coords(x=None, xdot=None):
    return TaskCoordinates(np.zeros(6) if x is None else np.asarray(x, float),
                           np.zeros(6) if xdot is None else np.asarray(xdot, float))


def manip_wrench(my=0.2):
    return Wrench(np.array([0.0, my, 0.0, 0.0, 0.0, 0.0]), "manipuland")


@pytest.fixture
def setup(model, scene):
    q = scene["q_grasp"]
    J = rb.jacobian(model, q, scene["bolt"].nut_pose(0.0))
    return q, J, rb.gravity_torque(model, q)


def test_stiffness_fixed_point(model, scene):
    q = scene["q_nominal"]
    qd = np.linspace(-0.2, 0.2, 7)
    tau0 = rb.gravity_torque(model, q)
    assert np.array_equal(stiffness_torques(model, q, qd, q, qd, Gains(), tau0=tau0), tau0)


def test_stiffness_is_mass_weighted_pd(model, scene):
    q = scene["q_nominal"]
    g = Gains()
    e = np.array([0.01, 0, 0, 0, 0, 0, 0])
    tau = stiffness_torques(model, q, np.zeros(7), q + e, np.zeros(7), g)
    assert np.allclose(tau - rb.gravity_torque(model, q), rb.mass_matrix(model, q) @ (g.kp * e))


def test_hybrid_fixed_point(model, setup):
    q, J, tau0 = setup
    x = coords(np.arange(6.0) * 0.1, np.arange(6.0) * 0.01)
    info = {}
    tau = hybrid_torques(model, q, np.zeros(7), x, x, manip_wrench(0.2), q, Gains(), J=J, tau0=tau0, info=info)
    assert np.array_equal(tau, tau0)
    assert not info["ill_conditioned"]


def test_unselected_rows_are_ignored(model, setup):
    q, J, tau0 = setup
    # errors in alpha, gamma, t_y and in the moments other than M_y have no effect
    x_d = coords([0.3, 0.0, -0.2, 0.0, 0.05, 0.0], [1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    rho = Wrench(np.array([5.0, 0.2, -3.0, 1.0, 2.0, 3.0]), "manipuland")
    tau = hybrid_torques(model, q, np.zeros(7), x_d, coords(), rho, q, Gains(), J=J, tau0=tau0)
    assert np.array_equal(tau, tau0)


def test_position_channel_column_and_linearity(model, setup):
    q, J, tau0 = setup
    g = Gains()
    for row in (3, 5):
        e = np.zeros(6)
        e[row] = 0.004
        tau = hybrid_torques(model, q, np.zeros(7), coords(e), coords(), manip_wrench(), q, g, J=J, tau0=tau0)
        assert np.allclose(tau - tau0, g.kp * 0.004 * J[row])
        g2 = Gains(kp=2 * g.kp)
        tau2 = hybrid_torques(model, q, np.zeros(7), coords(e), coords(), manip_wrench(), q, g2, J=J, tau0=tau0)
        assert np.allclose(tau2 - tau0, 2 * (tau - tau0))


def test_force_channel_sign(model, setup):
    q, J, tau0 = setup
    g = Gains()
    tau = hybrid_torques(model, q, np.zeros(7), coords(), coords(), manip_wrench(0.05), q, g, J=J, tau0=tau0)
    # map back to a task wrench; J has full row rank so J^T is injective
    w = np.linalg.lstsq(J.T, tau - tau0, rcond=None)[0]
    assert w[1] == pytest.approx(g.kfp * (0.2 - 0.05))
    assert np.allclose(np.delete(w, 1), 0.0, atol=1e-12)
    # too much sensed moment reverses the push
    tau = hybrid_torques(model, q, np.zeros(7), coords(), coords(), manip_wrench(0.5), q, g, J=J, tau0=tau0)
    assert np.linalg.lstsq(J.T, tau - tau0, rcond=None)[0][1] < 0


def test_rate_channel_uses_pitch_rate(model, setup):
    q, J, tau0 = setup
    g = Gains()
    xdot_d = np.zeros(6)
    xdot_d[1] = 0.03
    tau = hybrid_torques(model, q, np.zeros(7), coords(None, xdot_d), coords(), manip_wrench(), q, g, J=J, tau0=tau0)
    assert np.allclose(tau - tau0, g.kfd * 0.03 * J[1])


def test_null_space_term(model, setup):
    q, J, tau0 = setup
    g = Gains()
    qn = q + 0.1
    info = {}
    tau = hybrid_torques(model, q, np.zeros(7), coords(), coords(), manip_wrench(), qn, g, J=J, tau0=tau0, info=info)
    assert np.allclose(tau - tau0, info["tau_null"])
    assert np.allclose(J @ info["tau_null"], 0.0, atol=1e-9)
    N, _ = null_space_projector(J, g)
    assert np.allclose(info["tau_null"], g.epsilon * N @ (g.k2p * 0.1 * np.ones(7)))


def test_projector_on_random_configurations(model):
    rng = np.random.default_rng(3)
    g = Gains()
    for _ in range(100):
        q = rng.uniform(model.lower, model.upper)
        J = rb.jacobian(model, q)
        N, _ = null_space_projector(J, g)
        assert np.allclose(N @ N, N, atol=1e-10)
        assert np.allclose(N, N.T, atol=1e-12)
        assert np.allclose(J @ N, 0.0, atol=1e-10)
    # also at the stretched-out singularity, where one more direction joins the null space
    J = rb.jacobian(model, np.zeros(7))
    N, ill = null_space_projector(J, g)
    assert ill
    assert np.allclose(J @ N, 0.0, atol=1e-10)
    assert np.trace(N) == pytest.approx(7 - np.linalg.matrix_rank(J))


def test_damped_pseudoinverse_near_singularity(model):
    g = Gains()
    J = rb.jacobian(model, np.zeros(7))  # stretched upright, axes 1, 3, 5, 7 aligned
    J_pinv, ill = pseudoinverse(J, g)
    assert ill
    assert np.all(np.isfinite(J_pinv))
    assert np.linalg.norm(J_pinv, 2) <= 1.0 / (2 * g.pinv_damping) + 1e-9
    J_good = np.hstack([np.eye(6), np.zeros((6, 1))])
    J_pinv, ill = pseudoinverse(J_good, g)
    assert not ill and np.allclose(J_pinv, J_good.T)


def test_torque_ceiling(model, setup):
    q, J, tau0 = setup
    e = np.array([0, 0, 0, 100.0, 0, 0])
    tau = hybrid_torques(model, q, np.zeros(7), coords(e), coords(), manip_wrench(), q, Gains(), J=J, tau0=tau0)
    assert np.linalg.norm(tau) == pytest.approx(500.0)


def test_ft_project_oracles():
    w = Wrench(np.array([0.1, -0.2, 0.3, 1.0, 2.0, -1.5]), "gripper")
    same = ft_project(w, Pose.identity(), Pose.identity())
    assert same.frame == "manipuland" and np.array_equal(same.values, w.values)
    # a pure force at G shifted by p gains the moment p x f
    p = np.array([0.0, 0.0, 0.05])
    f = Wrench(np.array([0, 0, 0, 2.0, 0, 0]), "gripper")
    out = ft_project(f, Pose.identity(), Pose(np.eye(3), p))
    assert np.allclose(out.values[:3], np.cross(p, [2.0, 0, 0]))
    assert np.allclose(out.values[3:], [2.0, 0, 0])
    # rotation alone rotates both halves
    R = axis_angle([0, 0, 1], np.pi / 2)
    out = ft_project(w, Pose.identity(), Pose(R, np.zeros(3)))
    assert np.allclose(out.values, np.concatenate([R @ w.values[:3], R @ w.values[3:]]))
    # only the relative pose matters
    X = Pose(axis_angle([1, 1, 0], 0.4), np.array([0.3, -0.1, 0.2]))
    G = Pose(R, p)
    assert np.allclose(ft_project(w, X, X @ G).values, ft_project(w, Pose.identity(), G).values)
    with pytest.raises(ValueError):
        ft_project(out, Pose.identity(), Pose.identity())
    assert np.allclose(skew(p) @ [2.0, 0, 0], np.cross(p, [2.0, 0, 0]))


def test_hybrid_rejects_world_wrench(model, setup):
    q, J, tau0 = setup
    with pytest.raises(ValueError):
        hybrid_torques(model, q, np.zeros(7), coords(), coords(), Wrench(np.zeros(6), "world"), q, Gains(), J=J)
    with pytest.raises(ValueError):
        hybrid_torques(model, q, np.zeros(7), coords(), coords(), manip_wrench(), q, Gains())


def test_controller_switching():
    assert select_controller(Stage(StageTag.SCREW), True) is ControlMode.HYBRID
    assert select_controller(Stage(StageTag.SCREW), False) is ControlMode.STIFFNESS
    assert select_controller(Stage(StageTag.APPROACH), True) is ControlMode.STIFFNESS
    assert select_controller(Stage(StageTag.RETRACT), False) is ControlMode.STIFFNESS


def test_gains_validation():
    with pytest.raises(ValueError):
        Gains(kfp=-1.0)
