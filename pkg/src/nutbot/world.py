"""Discrete-time world: torque-driven arm, parallel gripper, nut on a bolt.

The nut is a 1-DoF screw joint (rotation about the bolt +y axis, axial
advance slaved to it by the thread pitch). Grasping is a kinematic weld:
once the fingers close on a pair of hex flats the gripper frame is locked
to the nut's helical motion and the arm/nut pair is integrated as one
constrained system. The constraint reaction is the contact wrench the F/T
sensor reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import rigidbody as rb
from .rigidbody import ChainModel
from .spatial import Pose, cross3, rot_y, rotvec_from_matrix

WRENCH_FRAMES = ("gripper", "manipuland", "world")


class NonFinite(FloatingPointError):
    """Dynamics produced NaN/Inf; the trial is marked failed."""


@dataclass(frozen=True)
class Wrench:
    """(M_x, M_y, M_z, f_x, f_y, f_z), moments first."""

    values: np.ndarray
    frame: str = "gripper"

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(6)
        if self.frame not in WRENCH_FRAMES:
            raise ValueError(f"unknown wrench frame {self.frame!r}")
        if not np.all(np.isfinite(v)):
            raise NonFinite("non-finite wrench")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def moment(self):
        return self.values[:3]

    @property
    def force(self):
        return self.values[3:]

    @classmethod
    def zero(cls, frame="gripper"):
        return cls(np.zeros(6), frame)


@dataclass(frozen=True)
class BoltModel:
    """Bolt, nut and grasp geometry.

    ``base_pose`` is the bolt frame: origin at the nut centre when
    theta = 0, +y along the major axis in the tightening (advance) sense.
    """

    base_pose: Pose
    thread_pitch: float = 0.008  # m per revolution
    pitch_per_radian: bool = False  # if set, thread_pitch is m per radian
    hex_across_corners: float = 0.066
    nut_inertia_about_axis: float = 1e-4
    coulomb: float = 0.05
    viscous: float = 0.2
    coulomb_smoothing: float = 1e-3  # rad/s, width of the tanh sign approximation
    grasp_position_tol: float = 0.02  # m; covers the diagonal of the IK tolerance box
    grasp_angle_tol: float = math.radians(3.0)
    grasp_slack: float = 0.002
    grasp_z_sign: float = -1.0  # gripper z = sign * bolt axis

    def __post_init__(self):
        if self.thread_pitch <= 0 or self.hex_across_corners <= 0:
            raise ValueError("thread_pitch and hex_across_corners must be positive")
        if self.coulomb < 0 or self.viscous < 0:
            raise ValueError("resistance terms must be non-negative")

    @property
    def advance_per_radian(self) -> float:
        if self.pitch_per_radian:
            return self.thread_pitch
        return self.thread_pitch / (2.0 * math.pi)

    @property
    def flat_width(self) -> float:
        return self.hex_across_corners * math.cos(math.pi / 6.0)

    @property
    def axis(self) -> np.ndarray:
        return self.base_pose.rotation[:, 1]

    def resistance(self, theta_dot: float) -> float:
        return self.coulomb * math.tanh(theta_dot / self.coulomb_smoothing) + self.viscous * theta_dot

    def nut_pose(self, theta: float) -> Pose:
        """Manipuland frame: bolt frame turned by theta and advanced along +y."""
        return Pose(*self.nut_frame(theta))

    def nut_frame(self, theta: float):
        """(rotation, translation) arrays of nut_pose, without building a Pose."""
        R_B = self.base_pose.rotation
        return R_B @ rot_y(theta), self.base_pose.translation + R_B[:, 1] * (theta * self.advance_per_radian)

    def face_direction(self, theta: float, k: int) -> np.ndarray:
        """Outward radial unit vector (world) of grasp direction k (a hex vertex)."""
        phi = theta + k * math.pi / 3.0
        local = np.array([math.cos(phi), 0.0, -math.sin(phi)])
        return self.base_pose.rotation @ local

    def grasp_pose(self, theta: float, k: int, radial_offset: float = 0.0) -> Pose:
        """Gripper pose grasping face k: fingers point at the axis, finger
        plane across a pair of flats, G origin at the nut centre (plus an
        outward radial offset for pre/post-grasp keyframes)."""
        u = self.face_direction(theta, k)
        y = -u
        z = self.grasp_z_sign * self.axis
        x = cross3(y, z)
        R = np.column_stack([x, y, z])
        centre = self.nut_pose(theta).translation
        return Pose(R, centre + radial_offset * u)


@dataclass(frozen=True)
class NutState:
    theta: float = 0.0
    theta_dot: float = 0.0
    advance_per_radian: float = 0.008 / (2.0 * math.pi)

    @property
    def y_advance(self) -> float:
        # derived, so the screw coupling holds by construction
        return self.theta * self.advance_per_radian


@dataclass(frozen=True)
class WorldState:
    q: np.ndarray
    qdot: np.ndarray
    gripper_aperture: float
    nut: NutState
    grasped: bool = False
    time: float = 0.0
    # gripper pose relative to the manipuland frame, fixed while grasped
    grasp_offset: Pose | None = None
    # wrench applied by the gripper to the nut: world axes, about G's origin
    contact_wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))


@dataclass(frozen=True)
class WorldConfig:
    dt: float = 1e-4
    max_aperture: float = 0.11
    gripper_speed: float = 0.1  # m/s aperture slew rate
    stabilization: float = 200.0  # rad/s, constraint drift correction bandwidth


@numba.njit(cache=True)
def _free_accel(M, bias, tau):
    return np.linalg.solve(M, tau - bias)


@numba.njit(cache=True)
def _constrained_accel(M, bias, tau, J, rhs, S, resistance, inertia):
    """Solve arm + nut dynamics under J qdd - S thdd = rhs.

    Returns (qdd, thdd, w) with w the wrench applied to the nut by the gripper.
    """
    Minv_Jt = np.linalg.solve(M, J.T.copy())
    Minv_f = np.linalg.solve(M, tau - bias)
    A = J @ Minv_Jt
    for i in range(6):
        for j in range(6):
            A[i, j] += S[i] * S[j] / inertia
        A[i, i] += 1e-12
    b = J @ Minv_f + S * (resistance / inertia) - rhs
    w = np.linalg.solve(A, b)
    qdd = Minv_f - Minv_Jt @ w
    thdd = (S @ w - resistance) / inertia
    return qdd, thdd, w


@numba.njit(cache=True)
def _rotvec(R):
    c = min(1.0, max(-1.0, 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)))
    angle = math.acos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * w
    return w * (angle / (2.0 * math.sin(angle)))


@numba.njit(cache=True)
def _grasped_accel(R_G, p_G, J, jdqd, M, bias, tau, qd, theta, theta_dot, R_B, p_B, adv,
                   off_R, off_p, coulomb, viscous, smooth, inertia, wb):
    """Welded-grasp accelerations with Baumgarte stabilization of the weld error."""
    c, s = math.cos(theta), math.sin(theta)
    Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    R_WM = R_B @ Ry
    a = R_B[:, 1].copy()
    p_WM = p_B + a * (theta * adv)
    r = p_G - p_WM
    a_r = np.cross(a, r)
    S = np.empty(6)
    S[:3] = a
    S[3:] = a_r + a * adv
    e = np.empty(6)
    e[:3] = _rotvec(R_G @ (R_WM @ off_R).T)
    e[3:] = p_G - (R_WM @ off_p + p_WM)
    rhs = -(jdqd + 2.0 * wb * (J @ qd - S * theta_dot) + wb * wb * e)
    rhs[3:] += np.cross(a, a_r) * theta_dot * theta_dot
    res = coulomb * math.tanh(theta_dot / smooth) + viscous * theta_dot
    return _constrained_accel(M, bias, tau, J, rhs, S, res, inertia)


@numba.njit(cache=True)
def _aligned(R_G, p_G, R_B, p_B, adv, theta, pos_tol, ang_tol):
    a = R_B[:, 1]
    p_WM = p_B + a * (theta * adv)
    d = p_G - p_WM
    if math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) > pos_tol:
        return False
    y = R_G[:, 1]
    x = R_G[:, 0]
    # palm axis radial: fingers perpendicular to the bolt axis
    if abs(math.asin(min(1.0, max(-1.0, y[0] * a[0] + y[1] * a[1] + y[2] * a[2])))) > ang_tol:
        return False
    # finger closing axis and palm axis in bolt coordinates; the closing
    # axis must be perpendicular to the bolt axis as well
    xb = np.zeros(3)
    yb = np.zeros(3)
    for i in range(3):
        for j in range(3):
            xb[i] += R_B[j, i] * x[j]
            yb[i] -= R_B[j, i] * y[j]
    if abs(xb[1]) > math.sin(ang_tol):
        return False
    # fingers must point at a hex vertex direction, i.e. close across a pair of flats
    phi = math.atan2(-yb[2], yb[0]) - theta
    dev = (phi + math.pi / 6.0) % (math.pi / 3.0) - math.pi / 6.0
    return abs(dev) <= ang_tol


def screw_joint_step(nut: NutState, applied_moment: float, bolt: BoltModel, dt: float) -> NutState:
    """Advance a nut driven only by a moment about its axis.

    Exact for constant acceleration over the step; Coulomb friction is
    treated implicitly so a resting nut stays put under sub-breakaway loads.
    """
    I = bolt.nut_inertia_about_axis
    w0 = nut.theta_dot
    trial = w0 + dt * (applied_moment - bolt.viscous * w0) / I
    if abs(w0) < 1e-12 and abs(applied_moment) <= bolt.coulomb:
        return replace(nut, theta_dot=0.0)
    friction = bolt.coulomb * math.copysign(1.0, trial if w0 == 0.0 else w0)
    acc = (applied_moment - friction - bolt.viscous * w0) / I
    w1 = w0 + dt * acc
    if w0 != 0.0 and w1 * w0 < 0.0 and abs(applied_moment) <= bolt.coulomb:
        # friction cannot reverse the motion; stop within the step
        return replace(nut, theta=nut.theta, theta_dot=0.0)
    theta = nut.theta + dt * w0 + 0.5 * dt * dt * acc
    return replace(nut, theta=theta, theta_dot=w1)


class World:
    """Steps a WorldState forward under commanded joint torques."""

    def __init__(self, model: ChainModel, bolt: BoltModel, config: WorldConfig | None = None):
        self.model = model
        self.bolt = bolt
        self.config = config or WorldConfig()

    def initial_state(self, q, theta=0.0, aperture=None) -> WorldState:
        q = np.array(q, dtype=float)
        return WorldState(
            q=q, qdot=np.zeros(7),
            gripper_aperture=self.config.max_aperture if aperture is None else aperture,
            nut=NutState(theta, 0.0, self.bolt.advance_per_radian),
        )

    def gripper_pose(self, state: WorldState) -> Pose:
        return rb.forward_kinematics(self.model, state.q)

    def manipuland_pose(self, state: WorldState) -> Pose:
        return self.bolt.nut_pose(state.nut.theta)

    def _pose_aligned(self, X_WG: Pose, theta: float) -> bool:
        return self._aligned_arrays(X_WG.rotation, X_WG.translation, theta)

    def _aligned_arrays(self, R_G, p_G, theta) -> bool:
        b = self.bolt
        return bool(_aligned(R_G, p_G, b.base_pose.rotation, b.base_pose.translation, b.advance_per_radian,
                             theta, b.grasp_position_tol, b.grasp_angle_tol))

    def grasp_check(self, state: WorldState) -> bool:
        """True iff the gripper pose and aperture form a stable grasp."""
        if state.gripper_aperture > self.bolt.flat_width + self.bolt.grasp_slack:
            return False
        return self._pose_aligned(self.gripper_pose(state), state.nut.theta)

    def sense_wrench(self, state: WorldState) -> Wrench:
        """Contact wrench applied to the nut, in the gripper frame about G."""
        if not state.grasped:
            return Wrench.zero("gripper")
        R = self.gripper_pose(state).rotation
        w = state.contact_wrench
        return Wrench(np.concatenate([R.T @ w[:3], R.T @ w[3:]]), "gripper")

    def dynamics_terms(self, q, qdot):
        """(R_G, p_G, J_world, Jdot qdot, M, bias, gravity torque) at (q, qdot)."""
        m = self.model
        return rb._dynamics_terms(np.asarray(q, dtype=float), np.asarray(qdot, dtype=float), m.gravity,
                                  m.X_fixed, m.axes, m.masses, m.coms, m.inertias, m.tool)

    def step(self, state: WorldState, tau, gripper_cmd: float, dt: float | None = None,
             terms=None) -> WorldState:
        """Advance one step. ``terms`` may carry dynamics_terms(state.q, state.qdot)
        already computed by the caller."""
        dt = self.config.dt if dt is None else dt
        if dt <= 0:
            raise ValueError("dt must be positive")
        tau = np.asarray(tau, dtype=float)
        if not math.isfinite(tau.sum()):
            raise NonFinite("non-finite torque command")
        model, bolt, cfg = self.model, self.bolt, self.config
        q, qd = state.q, state.qdot
        if terms is None:
            terms = self.dynamics_terms(q, qd)
        R_G, p_G, J, jdqd, M, bias, _ = terms
        nut = state.nut
        grasped = state.grasped
        offset = state.grasp_offset
        wrench = np.zeros(6)

        if grasped:
            qdd, thdd, wrench = _grasped_accel(
                R_G, p_G, J, jdqd, M, bias, tau, qd, nut.theta, nut.theta_dot,
                bolt.base_pose.rotation, bolt.base_pose.translation, bolt.advance_per_radian,
                offset.rotation, offset.translation, bolt.coulomb, bolt.viscous, bolt.coulomb_smoothing,
                bolt.nut_inertia_about_axis, cfg.stabilization)
            th_dot = nut.theta_dot + dt * thdd
            nut = NutState(nut.theta + dt * th_dot, th_dot, nut.advance_per_radian)
        else:
            qdd = _free_accel(M, bias, tau)
            if nut.theta_dot != 0.0:
                nut = screw_joint_step(nut, 0.0, bolt, dt)

        qd_new = qd + dt * qdd
        q_new = q + dt * qd_new
        if not (math.isfinite(q_new.sum() + qd_new.sum()) and math.isfinite(nut.theta)):
            raise NonFinite(f"non-finite state at t={state.time + dt:.4f}")

        # gripper aperture slews toward the command; fingers stop on the flats
        ap = state.gripper_aperture
        cmd = min(max(float(gripper_cmd), 0.0), cfg.max_aperture)
        step_ap = cfg.gripper_speed * dt
        ap = min(ap + step_ap, cmd) if cmd > ap else max(ap - step_ap, cmd)
        if grasped:
            aligned = True
        else:
            R_new, p_new = rb.tool_frame(model, q_new)
            aligned = self._aligned_arrays(R_new, p_new, nut.theta)
        if aligned and ap < bolt.flat_width:
            ap = bolt.flat_width

        if grasped and ap > bolt.flat_width + bolt.grasp_slack:
            grasped, offset = False, None
            nut = replace(nut, theta_dot=0.0)
        elif not grasped and aligned and ap <= bolt.flat_width + bolt.grasp_slack:
            grasped = True
            offset = bolt.nut_pose(nut.theta).inverse() @ Pose(R_new, p_new)
            # the weld removes relative motion about the axis
            nut = replace(nut, theta_dot=0.0)

        return WorldState(q_new, qd_new, ap, nut, grasped, state.time + dt, offset,
                          wrench if state.grasped and grasped else np.zeros(6))
