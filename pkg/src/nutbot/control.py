"""Switching controller: joint stiffness control and task-space hybrid
force/position control with a null-space joint-centering objective.

Task coordinates and wrenches in the manipuland frame are ordered
(alpha, beta, gamma, t_x, t_y, t_z) and (M_x, M_y, M_z, f_x, f_y, f_z);
beta / M_y is rotation / moment about the bolt axis.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numba
import numpy as np

from . import rigidbody as rb
from .planner import Stage, StageTag
from .spatial import Pose, wrench_transform
from .world import Wrench

log = logging.getLogger(__name__)

# zero-padding masks over the 6 task rows
POSITION_ROWS = np.array([0, 0, 0, 1, 0, 1], dtype=float)  # t_x, t_z
FORCE_ROWS = np.array([0, 1, 0, 0, 0, 0], dtype=float)  # M_y / beta
RANK_TOL = 1e-12  # relative singular value below which a direction counts as lost


class ControlMode(str, enum.Enum):
    STIFFNESS = "Stiffness"
    HYBRID = "Hybrid"


@dataclass(frozen=True)
class Gains:
    kp: float = 100.0
    kd: float = 20.0
    kfp: float = 0.2
    kfd: float = 10.0
    k2p: float = 100.0
    k2d: float = 20.0
    epsilon: float = 1e-2
    desired_moment: float = 0.2  # N m about the bolt axis
    pinv_threshold: float = 1e-2  # smallest singular value that triggers damping
    pinv_damping: float = 1e-3
    torque_ceiling: float = 500.0  # N m, bound on the hybrid torque norm

    def __post_init__(self):
        for name in ("kp", "kd", "kfp", "kfd", "k2p", "k2d", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"gain {name} must be non-negative")


@dataclass(frozen=True)
class TaskCoordinates:
    x: np.ndarray  # (alpha, beta, gamma, t_x, t_y, t_z)
    xdot: np.ndarray


def select_controller(stage: Stage, grasped: bool) -> ControlMode:
    if stage.tag == StageTag.SCREW and grasped:
        return ControlMode.HYBRID
    return ControlMode.STIFFNESS


def stiffness_torques(model, q, qdot, q_d, qdot_d, gains: Gains, M=None, tau0=None):
    """tau = g(q) + M(q) (kp (q_d - q) + kd (qdot_d - qdot))."""
    q = np.asarray(q, dtype=float)
    if M is None:
        M = rb.mass_matrix(model, q)
    if tau0 is None:
        tau0 = rb.gravity_torque(model, q)
    return tau0 + M @ (gains.kp * (np.asarray(q_d) - q) + gains.kd * (np.asarray(qdot_d) - np.asarray(qdot)))


def ft_project(raw: Wrench, manipuland_pose: Pose, gripper_pose: Pose) -> Wrench:
    """Re-express a gripper-frame wrench (about G) in the manipuland frame
    (about the manipuland origin)."""
    if raw.frame != "gripper":
        raise ValueError("ft_project expects a gripper-frame wrench")
    X_MG = manipuland_pose.inverse() @ gripper_pose
    return Wrench(wrench_transform(X_MG) @ raw.values, "manipuland")


def pseudoinverse(J, gains: Gains):
    """Moore-Penrose inverse, switching to damped least squares when the
    smallest singular value drops below the threshold.

    Returns (J_pinv, ill_conditioned).
    """
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    ill = bool(s[-1] < gains.pinv_threshold)
    if ill:
        inv_s = s / (s * s + gains.pinv_damping ** 2)
    else:
        inv_s = 1.0 / s
    return (Vt.T * inv_s) @ U.T, ill


def null_space_projector(J, gains: Gains):
    """I - J^+ J, built from the row-space basis so it stays an exact
    orthogonal projector near singularities (where J^+ itself is damped).

    Returns (N, ill_conditioned).
    """
    _, s, Vt = np.linalg.svd(J)
    V = Vt[: int(np.sum(s > RANK_TOL * s[0]))].T
    return np.eye(J.shape[1]) - V @ V.T, bool(s[-1] < gains.pinv_threshold)


def task_coordinates(X_MG: Pose, twist_M):
    """(alpha, beta, gamma, t_x, t_y, t_z) of G in the manipuland frame.
    Angles are the rotation-vector components of R_MG."""
    from .spatial import rotvec_from_matrix
    return TaskCoordinates(np.concatenate([rotvec_from_matrix(X_MG.rotation), X_MG.translation]),
                           np.asarray(twist_M, dtype=float))


@numba.njit(cache=True)
def _hybrid_core(J, tau0, q, qdot, x_d, xdot_d, x_s, xdot_s, rho_s, q_nominal,
                 kp, kd, kfp, kfd, k2p, k2d, epsilon, rho_d2, threshold, ceiling):
    e_pos = np.zeros(6)
    e_vel = np.zeros(6)
    for i in (3, 5):
        e_pos[i] = x_d[i] - x_s[i]
        e_vel[i] = xdot_d[i] - xdot_s[i]
    e_force = np.zeros(6)
    e_rate = np.zeros(6)
    e_force[1] = rho_d2 - rho_s[1]
    e_rate[1] = xdot_d[1] - xdot_s[1]
    U, sv, Vt = np.linalg.svd(J, full_matrices=False)
    ill = sv[-1] < threshold
    r = 0
    while r < sv.size and sv[r] > RANK_TOL * sv[0]:
        r += 1
    V = np.ascontiguousarray(Vt[:r].T)
    N = np.eye(J.shape[1]) - V @ V.T
    tau_null = epsilon * (N @ (k2p * (q_nominal - q) - k2d * qdot))
    tau = tau0 + J.T @ (kp * e_pos + kd * e_vel + kfp * e_force + kfd * e_rate) + tau_null
    n = np.sqrt(tau @ tau)
    if n > ceiling:
        tau = tau * (ceiling / n)
    return tau, e_pos, e_force, e_rate, tau_null, ill


def hybrid_torques(model, q, qdot, x_d: TaskCoordinates, x_s: TaskCoordinates, rho_s: Wrench,
                   q_nominal, gains: Gains, J=None, tau0=None, info: dict | None = None):
    """Task-space hybrid force/position torques.

    J is the 6x7 Jacobian expressed in the manipuland frame. Position error
    acts on t_x, t_z only, the moment error and pitch-rate error act on
    beta only, and the joint-centering term is projected into the null
    space of J. If ``info`` is given it receives the padded error vectors,
    the null-space torque and the conditioning flag.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    if rho_s.frame != "manipuland":
        raise ValueError("sensed wrench must be expressed in the manipuland frame")
    if J is None:
        raise ValueError("hybrid control needs the manipuland-frame Jacobian")
    if tau0 is None:
        tau0 = rb.gravity_torque(model, q)
    g = gains
    # the rate term uses the pitch-angle rate, never a derivative of the sensed wrench
    tau, e_pos, e_force, e_rate, tau_null, ill = _hybrid_core(
        np.ascontiguousarray(J, dtype=float), np.asarray(tau0, dtype=float), q, qdot,
        np.asarray(x_d.x, dtype=float), np.asarray(x_d.xdot, dtype=float),
        np.asarray(x_s.x, dtype=float), np.asarray(x_s.xdot, dtype=float),
        np.asarray(rho_s.values, dtype=float), np.asarray(q_nominal, dtype=float),
        g.kp, g.kd, g.kfp, g.kfd, g.k2p, g.k2d, g.epsilon, g.desired_moment,
        g.pinv_threshold, g.torque_ceiling)
    if ill:
        log.debug("hybrid control: Jacobian near singular (sigma_min below threshold)")
    if info is not None:
        info.update(e_pos=e_pos, e_force=e_force, e_rate=e_rate, tau_null=tau_null, ill_conditioned=bool(ill))
    return tau
