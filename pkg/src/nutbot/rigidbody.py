"""Kinematics and dynamics of a 7-DoF revolute serial chain.

The chain description lives in a plain-text model file (see
``models/iiwa14.model`` for the key list). Numerical kernels are compiled
with numba; the public functions below wrap them with the ChainModel.

Conventions: spatial vectors are stacked (angular; linear). The Jacobian
maps qdot to the angular velocity of the gripper frame G and the linear
velocity of G's origin.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numba
import numpy as np

from .spatial import Pose, rotate_6, rpy_to_matrix

NJ = 7


@dataclass(frozen=True, eq=False)
class ChainModel:
    """Immutable arm description. Arrays are read-only after load."""

    X_fixed: np.ndarray  # (7, 4, 4) parent -> joint frame at q = 0
    axes: np.ndarray  # (7, 3) joint axes in the joint frames
    masses: np.ndarray  # (7,)
    coms: np.ndarray  # (7, 3)
    inertias: np.ndarray  # (7, 3, 3) about the com, joint-frame axes
    lower: np.ndarray
    upper: np.ndarray
    velocity_limits: np.ndarray
    tool: np.ndarray  # (4, 4) link 7 -> G
    gravity: np.ndarray

    def __post_init__(self):
        for name in ("X_fixed", "axes", "masses", "coms", "inertias", "lower", "upper",
                     "velocity_limits", "tool", "gravity"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.axes.shape != (NJ, 3):
            raise ValueError("chain must have exactly 7 revolute joints")
        if np.any(self.lower >= self.upper):
            raise ValueError("joint limits need lower < upper")
        for I in self.inertias:
            if not np.allclose(I, I.T) or np.linalg.eigvalsh(I).min() <= 0:
                raise ValueError("link inertia must be symmetric positive definite")

    def with_gravity(self, g) -> "ChainModel":
        return _replace(self, gravity=np.asarray(g, dtype=float))

    def within_limits(self, q, margin=0.0) -> bool:
        q = np.asarray(q)
        return bool(np.all(q >= self.lower + margin) and np.all(q <= self.upper - margin))


def _replace(model, **kw):
    fields = {k: getattr(model, k) for k in model.__dataclass_fields__}
    fields.update(kw)
    return ChainModel(**fields)


def _transform(xyzrpy):
    T = np.eye(4)
    T[:3, :3] = rpy_to_matrix(*xyzrpy[3:])
    T[:3, 3] = xyzrpy[:3]
    return T


def parse_model(text: str) -> ChainModel:
    """Parse the key = value model format."""
    kv = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed model line: {raw!r}")
        kv[key.strip()] = np.array([float(v) for v in value.split()])

    def get(key, n):
        if key not in kv:
            raise ValueError(f"model file missing {key}")
        if kv[key].size != n:
            raise ValueError(f"{key}: expected {n} numbers, got {kv[key].size}")
        return kv[key]

    X, axes, m, c, inertia, lo, hi, vl = [], [], [], [], [], [], [], []
    for i in range(1, NJ + 1):
        X.append(_transform(get(f"joint.{i}.offset_transform", 6)))
        a = get(f"joint.{i}.axis", 3)
        axes.append(a / np.linalg.norm(a))
        lim = get(f"joint.{i}.limits", 2)
        lo.append(lim[0])
        hi.append(lim[1])
        vl.append(get(f"joint.{i}.velocity_limit", 1)[0])
        m.append(get(f"link.{i}.mass", 1)[0])
        c.append(get(f"link.{i}.com", 3))
        ixx, iyy, izz, ixy, ixz, iyz = get(f"link.{i}.inertia", 6)
        inertia.append(np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]]))
    tool = _transform(get("tool.offset_transform", 6))
    gravity = kv.get("gravity", np.array([0.0, 0.0, -9.81]))
    return ChainModel(np.array(X), np.array(axes), np.array(m), np.array(c), np.array(inertia),
                      np.array(lo), np.array(hi), np.array(vl), tool, gravity)


def load_model(path=None) -> ChainModel:
    """Load a model file; default is the bundled iiwa14 description."""
    if path is None:
        text = resources.files("nutbot").joinpath("models/iiwa14.model").read_text()
    else:
        text = Path(path).read_text()
    return parse_model(text)


_DEFAULT = None


def default_model() -> ChainModel:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_model()
    return _DEFAULT


# ---------------------------------------------------------------------------
# compiled kernels (allocation-light: small fixed buffers, scalar loops)

@numba.njit(cache=True, inline="always")
def _cross_into(a, b, out):
    x = a[1] * b[2] - a[2] * b[1]
    y = a[2] * b[0] - a[0] * b[2]
    z = a[0] * b[1] - a[1] * b[0]
    out[0] = x
    out[1] = y
    out[2] = z


@numba.njit(cache=True)
def _frames_into(q, X_fixed, axes, tool, R, p):
    """World rotations/origins of the 7 joint frames (0..6) and G (7)."""
    Rc = np.eye(3)
    tmp = np.empty((3, 3))
    pc = np.zeros(3)
    for i in range(7):
        for r in range(3):
            pc[r] += Rc[r, 0] * X_fixed[i, 0, 3] + Rc[r, 1] * X_fixed[i, 1, 3] + Rc[r, 2] * X_fixed[i, 2, 3]
        # tmp = Rc @ X_fixed rotation
        for r in range(3):
            for c in range(3):
                tmp[r, c] = Rc[r, 0] * X_fixed[i, 0, c] + Rc[r, 1] * X_fixed[i, 1, c] + Rc[r, 2] * X_fixed[i, 2, c]
        # Rc = tmp @ rot(axis, q)
        ax, ay, az = axes[i, 0], axes[i, 1], axes[i, 2]
        co = np.cos(q[i])
        si = np.sin(q[i])
        v = 1.0 - co
        r00 = co + ax * ax * v
        r01 = ax * ay * v - az * si
        r02 = ax * az * v + ay * si
        r10 = ay * ax * v + az * si
        r11 = co + ay * ay * v
        r12 = ay * az * v - ax * si
        r20 = az * ax * v - ay * si
        r21 = az * ay * v + ax * si
        r22 = co + az * az * v
        for r in range(3):
            t0, t1, t2 = tmp[r, 0], tmp[r, 1], tmp[r, 2]
            Rc[r, 0] = t0 * r00 + t1 * r10 + t2 * r20
            Rc[r, 1] = t0 * r01 + t1 * r11 + t2 * r21
            Rc[r, 2] = t0 * r02 + t1 * r12 + t2 * r22
        R[i] = Rc
        p[i] = pc
    for r in range(3):
        p[7, r] = pc[r] + Rc[r, 0] * tool[0, 3] + Rc[r, 1] * tool[1, 3] + Rc[r, 2] * tool[2, 3]
        for c in range(3):
            R[7, r, c] = Rc[r, 0] * tool[0, c] + Rc[r, 1] * tool[1, c] + Rc[r, 2] * tool[2, c]


@numba.njit(cache=True)
def _frames(q, X_fixed, axes, tool):
    R = np.empty((8, 3, 3))
    p = np.empty((8, 3))
    _frames_into(q, X_fixed, axes, tool, R, p)
    return R, p


@numba.njit(cache=True)
def _jacobian_from_frames(R, p, axes, J):
    for i in range(7):
        for r in range(3):
            J[r, i] = R[i, r, 0] * axes[i, 0] + R[i, r, 1] * axes[i, 1] + R[i, r, 2] * axes[i, 2]
        dx = p[7, 0] - p[i, 0]
        dy = p[7, 1] - p[i, 1]
        dz = p[7, 2] - p[i, 2]
        J[3, i] = J[1, i] * dz - J[2, i] * dy
        J[4, i] = J[2, i] * dx - J[0, i] * dz
        J[5, i] = J[0, i] * dy - J[1, i] * dx


@numba.njit(cache=True)
def _jacobian_world(q, X_fixed, axes, tool):
    R, p = _frames(q, X_fixed, axes, tool)
    J = np.empty((6, 7))
    _jacobian_from_frames(R, p, axes, J)
    return J


@numba.njit(cache=True)
def _rnea_frames(R, p, qd, qdd, g, axes, masses, coms, inertias, tau):
    """Recursive Newton-Euler in world coordinates on precomputed frames."""
    w = np.zeros(3)
    wd = np.zeros(3)
    a = np.empty(3)
    for k in range(3):
        a[k] = -g[k]  # base acceleration absorbs gravity
    F = np.empty((7, 3))
    N = np.empty((7, 3))
    rc = np.empty((7, 3))
    z = np.empty((7, 3))
    t1 = np.empty(3)
    t2 = np.empty(3)
    lw = np.empty(3)
    lv = np.empty(3)
    for i in range(7):
        # origin acceleration, origin fixed in the parent link
        if i == 0:
            for k in range(3):
                t1[k] = p[0, k]
        else:
            for k in range(3):
                t1[k] = p[i, k] - p[i - 1, k]
        _cross_into(wd, t1, t2)
        for k in range(3):
            a[k] += t2[k]
        _cross_into(w, t1, t2)
        _cross_into(w, t2, t1)
        for k in range(3):
            a[k] += t1[k]
        for k in range(3):
            z[i, k] = R[i, k, 0] * axes[i, 0] + R[i, k, 1] * axes[i, 1] + R[i, k, 2] * axes[i, 2]
        # wd += z qdd + w x z qd ; w += z qd
        _cross_into(w, z[i], t1)
        for k in range(3):
            wd[k] += z[i, k] * qdd[i] + t1[k] * qd[i]
            w[k] += z[i, k] * qd[i]
        for k in range(3):
            rc[i, k] = R[i, k, 0] * coms[i, 0] + R[i, k, 1] * coms[i, 1] + R[i, k, 2] * coms[i, 2]
        _cross_into(wd, rc[i], t1)
        _cross_into(w, rc[i], t2)
        _cross_into(w, t2, lv)
        for k in range(3):
            F[i, k] = masses[i] * (a[k] + t1[k] + lv[k])
        # inertia in world axes: R I R^T
        for k in range(3):
            lw[k] = R[i, 0, k] * wd[0] + R[i, 1, k] * wd[1] + R[i, 2, k] * wd[2]
            lv[k] = R[i, 0, k] * w[0] + R[i, 1, k] * w[1] + R[i, 2, k] * w[2]
        for k in range(3):
            t1[k] = inertias[i, k, 0] * lw[0] + inertias[i, k, 1] * lw[1] + inertias[i, k, 2] * lw[2]
            t2[k] = inertias[i, k, 0] * lv[0] + inertias[i, k, 1] * lv[1] + inertias[i, k, 2] * lv[2]
        for k in range(3):
            lw[k] = R[i, k, 0] * t1[0] + R[i, k, 1] * t1[1] + R[i, k, 2] * t1[2]
            lv[k] = R[i, k, 0] * t2[0] + R[i, k, 1] * t2[1] + R[i, k, 2] * t2[2]
        _cross_into(w, lv, t2)
        for k in range(3):
            N[i, k] = lw[k] + t2[k]
    f = np.zeros(3)
    n = np.zeros(3)
    for i in range(6, -1, -1):
        if i < 6:
            for k in range(3):
                t1[k] = p[i + 1, k] - p[i, k]
            _cross_into(t1, f, t2)
            for k in range(3):
                n[k] += t2[k]
        _cross_into(rc[i], F[i], t2)
        for k in range(3):
            n[k] += N[i, k] + t2[k]
            f[k] += F[i, k]
        tau[i] = z[i, 0] * n[0] + z[i, 1] * n[1] + z[i, 2] * n[2]


@numba.njit(cache=True)
def _rnea(q, qd, qdd, g, X_fixed, axes, masses, coms, inertias, tool):
    R, p = _frames(q, X_fixed, axes, tool)
    tau = np.empty(7)
    _rnea_frames(R, p, qd, qdd, g, axes, masses, coms, inertias, tau)
    return tau


@numba.njit(cache=True)
def _mass_matrix_frames(R, p, axes, masses, coms, inertias, M):
    zero = np.zeros(7)
    g0 = np.zeros(3)
    e = np.zeros(7)
    col = np.empty(7)
    for j in range(7):
        e[:] = 0.0
        e[j] = 1.0
        _rnea_frames(R, p, zero, e, g0, axes, masses, coms, inertias, col)
        for i in range(7):
            M[i, j] = col[i]
    # symmetrise away round-off
    for i in range(7):
        for j in range(i + 1, 7):
            m = 0.5 * (M[i, j] + M[j, i])
            M[i, j] = m
            M[j, i] = m


@numba.njit(cache=True)
def _mass_matrix(q, X_fixed, axes, masses, coms, inertias, tool):
    R, p = _frames(q, X_fixed, axes, tool)
    M = np.empty((7, 7))
    _mass_matrix_frames(R, p, axes, masses, coms, inertias, M)
    return M


@numba.njit(cache=True)
def _bias_accel_frames(R, p, qd, axes, out):
    """Jdot @ qd for the world-frame Jacobian at G (qdd = 0, no gravity)."""
    w = np.zeros(3)
    wd = np.zeros(3)
    a = np.zeros(3)
    d = np.empty(3)
    t1 = np.empty(3)
    t2 = np.empty(3)
    z = np.empty(3)
    for i in range(8):
        if i == 0:
            for k in range(3):
                d[k] = p[0, k]
        else:
            for k in range(3):
                d[k] = p[i, k] - p[i - 1, k]
        _cross_into(wd, d, t1)
        _cross_into(w, d, t2)
        _cross_into(w, t2, d)
        for k in range(3):
            a[k] += t1[k] + d[k]
        if i < 7:
            for k in range(3):
                z[k] = R[i, k, 0] * axes[i, 0] + R[i, k, 1] * axes[i, 1] + R[i, k, 2] * axes[i, 2]
            _cross_into(w, z, t1)
            for k in range(3):
                wd[k] += t1[k] * qd[i]
                w[k] += z[k] * qd[i]
    out[:3] = wd
    out[3:] = a


@numba.njit(cache=True)
def _tool_bias_accel(q, qd, X_fixed, axes, tool):
    R, p = _frames(q, X_fixed, axes, tool)
    out = np.empty(6)
    _bias_accel_frames(R, p, qd, axes, out)
    return out


@numba.njit(cache=True)
def _dynamics_terms(q, qd, g, X_fixed, axes, masses, coms, inertias, tool):
    """Everything one simulation step needs, sharing a single frame pass:
    G rotation and origin, world Jacobian, Jdot qd, M, bias and gravity torques."""
    R = np.empty((8, 3, 3))
    p = np.empty((8, 3))
    _frames_into(q, X_fixed, axes, tool, R, p)
    J = np.empty((6, 7))
    _jacobian_from_frames(R, p, axes, J)
    jdqd = np.empty(6)
    _bias_accel_frames(R, p, qd, axes, jdqd)
    M = np.empty((7, 7))
    _mass_matrix_frames(R, p, axes, masses, coms, inertias, M)
    bias = np.empty(7)
    zero = np.zeros(7)
    _rnea_frames(R, p, qd, zero, g, axes, masses, coms, inertias, bias)
    grav = np.empty(7)
    _rnea_frames(R, p, zero, zero, g, axes, masses, coms, inertias, grav)
    return R[7].copy(), p[7].copy(), J, jdqd, M, bias, grav


# ---------------------------------------------------------------------------
# public API

def _q(q):
    return np.ascontiguousarray(q, dtype=np.float64)


def link_frames(model: ChainModel, q):
    """World rotations (8, 3, 3) and origins (8, 3) of joints 1..7 and G."""
    return _frames(_q(q), model.X_fixed, model.axes, model.tool)


def forward_kinematics(model: ChainModel, q) -> Pose:
    """Pose of the gripper frame G in the world frame."""
    return Pose(*tool_frame(model, q))


def tool_frame(model: ChainModel, q):
    """(rotation, translation) of G as plain arrays."""
    R, p = _frames(_q(q), model.X_fixed, model.axes, model.tool)
    return R[7], p[7]


def jacobian(model: ChainModel, q, frame: Pose | None = None) -> np.ndarray:
    """6x7 Jacobian of G, rows (angular; linear), expressed in `frame`.

    `frame` only sets the axes the velocities are expressed in; the linear
    rows are always the velocity of G's origin. None means world.
    """
    J = _jacobian_world(_q(q), model.X_fixed, model.axes, model.tool)
    if frame is None:
        return J
    return rotate_6(frame.rotation.T) @ J


def jacobian_dot_qdot(model: ChainModel, q, qdot) -> np.ndarray:
    return _tool_bias_accel(_q(q), _q(qdot), model.X_fixed, model.axes, model.tool)


def inverse_dynamics(model: ChainModel, q, qdot, qddot) -> np.ndarray:
    return _rnea(_q(q), _q(qdot), _q(qddot), model.gravity, model.X_fixed, model.axes,
                 model.masses, model.coms, model.inertias, model.tool)


def mass_matrix(model: ChainModel, q) -> np.ndarray:
    return _mass_matrix(_q(q), model.X_fixed, model.axes, model.masses, model.coms,
                        model.inertias, model.tool)


def bias_forces(model: ChainModel, q, qdot) -> np.ndarray:
    """C(q, qdot) qdot + g(q)."""
    return inverse_dynamics(model, q, qdot, np.zeros(NJ))


def gravity_torque(model: ChainModel, q) -> np.ndarray:
    """Torque holding the arm still against gravity."""
    return inverse_dynamics(model, q, np.zeros(NJ), np.zeros(NJ))


def manipulability(model: ChainModel, q) -> float:
    J = jacobian(model, q)
    return float(np.sqrt(max(np.linalg.det(J @ J.T), 0.0)))


def forward_dynamics(model: ChainModel, q, qdot, tau) -> np.ndarray:
    M = mass_matrix(model, q)
    return np.linalg.solve(M, np.asarray(tau) - bias_forces(model, q, qdot))
