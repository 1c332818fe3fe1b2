"""Hierarchical planner: stage keyframes, per-keyframe IK, FOH trajectories.

The planner cycles Approach -> Screw -> Retract for a commanded number of
turns. Each stage is planned at its transition from the current world
state: keyframes first, then one nearest-configuration IK solve per
keyframe, then a first-order-hold joint trajectory plus a 1-D gripper
aperture trajectory. An IK failure ends the run (exceptional termination).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import rigidbody as rb
from .rigidbody import ChainModel
from .spatial import Pose, rotvec_from_matrix
from .world import BoltModel, WorldState

TRANSLATION_TOL = 0.01  # m, per axis
ROTATION_TOL = math.radians(0.5)  # rad, per rotation-vector component


class StageTag(str, enum.Enum):
    APPROACH = "Approach"
    SCREW = "Screw"
    RETRACT = "Retract"


_NEXT = {StageTag.APPROACH: StageTag.SCREW, StageTag.SCREW: StageTag.RETRACT,
         StageTag.RETRACT: StageTag.APPROACH}


@dataclass(frozen=True)
class Stage:
    tag: StageTag
    turn_index: int = 0


class PlanningError(RuntimeError):
    pass


class Diverged(PlanningError):
    """IK could not meet the keyframe tolerance box."""


class NoFeasibleGrasp(PlanningError):
    """None of the six grasp directions has a feasible IK solution."""


@dataclass(frozen=True)
class Keyframe:
    pose: Pose
    duration_from_prev: float  # s; 0 only for the first keyframe of a plan
    gripper_action: str = "none"  # none | open | close
    hold: float = 0.0  # s the arm stays put at this keyframe while the fingers move

    def __post_init__(self):
        if self.gripper_action not in ("none", "open", "close"):
            raise ValueError(f"bad gripper action {self.gripper_action!r}")
        if self.duration_from_prev < 0 or self.hold < 0:
            raise ValueError("durations must be non-negative")
        if self.gripper_action != "none" and self.hold <= 0:
            raise ValueError("gripper actions need a stationary hold window")


@dataclass(frozen=True)
class KeyframePlan:
    stage: Stage
    keyframes: tuple
    grasp_dir: int


@dataclass(frozen=True)
class PlannerConfig:
    radial_offset: float = 0.10
    turn_angle: float = math.radians(30.0)
    turn_mode: str = "fixed"  # fixed | max_manipulability
    min_manipulability: float = 0.02
    max_turn_angle: float = math.radians(60.0)
    screw_segments: int = 3
    approach_leg: float = 2.0
    screw_duration: float = 4.0
    gripper_window: float = 1.0
    ik_iterations: int = 200
    open_aperture: float = 0.11
    closed_aperture: float = 0.0


class JointTrajectory:
    """First-order hold through knots at strictly increasing breakpoints."""

    def __init__(self, times, knots):
        self.times = np.asarray(times, dtype=float)
        self.knots = np.asarray(knots, dtype=float)
        if self.knots.ndim == 1:
            self.knots = self.knots[:, None]
        if len(self.times) != len(self.knots) or len(self.times) < 1:
            raise ValueError("one knot per breakpoint required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("breakpoints must be strictly increasing")

    @property
    def start_time(self):
        return float(self.times[0])

    @property
    def end_time(self):
        return float(self.times[-1])

    def _segment(self, t):
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(i, 0), len(self.times) - 2)

    def value(self, t):
        if len(self.times) == 1 or t <= self.times[0]:
            return self.knots[0].copy()
        if t >= self.times[-1]:
            return self.knots[-1].copy()
        i = self._segment(t)
        s = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return (1.0 - s) * self.knots[i] + s * self.knots[i + 1]

    def derivative(self, t):
        if len(self.times) == 1 or t < self.times[0] or t >= self.times[-1]:
            return np.zeros(self.knots.shape[1])
        i = self._segment(t)
        return (self.knots[i + 1] - self.knots[i]) / (self.times[i + 1] - self.times[i])

    def sample(self, t):
        """(value, derivative) at t with a single segment lookup."""
        n = len(self.times)
        if n == 1 or t < self.times[0] or t >= self.times[-1]:
            return self.value(t), np.zeros(self.knots.shape[1])
        i = self._segment(t)
        t0, t1 = self.times[i], self.times[i + 1]
        k0, k1 = self.knots[i], self.knots[i + 1]
        s = (t - t0) / (t1 - t0)
        return (1.0 - s) * k0 + s * k1, (k1 - k0) / (t1 - t0)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.times.tobytes())
        h.update(self.knots.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# inverse kinematics

def pose_error(model: ChainModel, q, target: Pose):
    """Translation difference (world axes) and rotation vector of
    R_target^T R(q); both vanish at the target."""
    X = rb.forward_kinematics(model, q)
    dt = X.translation - target.translation
    dr = rotvec_from_matrix(target.rotation.T @ X.rotation)
    return dt, dr


def within_tolerance(model, q, target: Pose, scale=1.0) -> bool:
    dt, dr = pose_error(model, q, target)
    return bool(np.all(np.abs(dt) < scale * TRANSLATION_TOL) and np.all(np.abs(dr) < scale * ROTATION_TOL))


def _dls_reach(model, q0, target, iterations, damping=1e-2):
    """Damped least-squares pose servo used to find a feasible start.
    Joints pinned at a limit and pushed outward drop out of the step."""
    q = np.array(q0, dtype=float)
    lo, hi = model.lower + 1e-6, model.upper - 1e-6
    for _ in range(iterations):
        X = rb.forward_kinematics(model, q)
        e_rot = rotvec_from_matrix(target.rotation @ X.rotation.T)
        e = np.concatenate([e_rot, target.translation - X.translation])
        if np.linalg.norm(e[:3]) < 1e-4 and np.linalg.norm(e[3:]) < 1e-5:
            break
        J = rb.jacobian(model, q)
        free = np.ones(7, dtype=bool)
        for _pass in range(3):
            Jf = J * free
            step = Jf.T @ np.linalg.solve(Jf @ Jf.T + damping ** 2 * np.eye(6), e)
            blocked = ((q <= lo) & (step < 0)) | ((q >= hi) & (step > 0))
            if not np.any(blocked & free):
                break
            free &= ~blocked
        n = np.linalg.norm(step)
        if n > 0.3:
            step *= 0.3 / n
        q = np.clip(q + step, lo, hi)
    return q


def solve_keyframe_ik(target, q0, model: ChainModel, iterations: int = 200):
    """Configuration nearest to q0 whose gripper pose sits in the tolerance
    box of the target keyframe (0.01 m per axis, 0.5 deg per rotation
    component), within joint limits. Raises Diverged otherwise."""
    pose = target.pose if isinstance(target, Keyframe) else target
    q0 = np.asarray(q0, dtype=float)
    if model.within_limits(q0) and within_tolerance(model, q0, pose):
        return q0.copy()

    # constraints are posed slightly inside the box so the strict audit passes
    tt, tr = 0.9 * TRANSLATION_TOL, 0.9 * ROTATION_TOL

    def cons(q):
        dt, dr = pose_error(model, q, pose)
        return np.concatenate([tt - dt, tt + dt, tr - dr, tr + dr])

    def obj(q):
        d = q - q0
        return float(d @ d)

    def grad(q):
        return 2.0 * (q - q0)

    bounds = list(zip(model.lower, model.upper))
    starts = [_dls_reach(model, q0, pose, iterations)]
    best = None
    for start in starts + [q0]:
        with warnings.catch_warnings():
            # SLSQP clips its own trial points to the bounds and says so
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(obj, start, jac=grad, method="SLSQP", bounds=bounds,
                           constraints=[{"type": "ineq", "fun": cons}],
                           options={"maxiter": iterations, "ftol": 1e-12})
        q = np.clip(res.x, model.lower, model.upper)
        if within_tolerance(model, q, pose):
            if best is None or obj(q) < obj(best):
                best = q
            break
    if best is None:
        raise Diverged("keyframe IK failed to meet the tolerance box")
    return best


# ---------------------------------------------------------------------------
# keyframes

def select_grasp_direction(bolt: BoltModel, nut_theta: float, q_now, model: ChainModel,
                           iterations: int = 200):
    """Index of the hex grasp direction whose grasp IK lands nearest q_now.

    Returns (index, solution). Raises NoFeasibleGrasp if all six fail.
    """
    best = None
    for k in range(6):
        try:
            q = solve_keyframe_ik(bolt.grasp_pose(nut_theta, k), q_now, model, iterations)
        except Diverged:
            continue
        if not model.within_limits(q):
            continue
        d = float(np.linalg.norm(q - q_now))
        if best is None or d < best[0]:
            best = (d, k, q)
    if best is None:
        raise NoFeasibleGrasp("no hex face admits a feasible grasp")
    return best[1], best[2]


def screw_turn_angle(bolt, theta, k, q_start, model, config: PlannerConfig):
    """Turn angle for the screw stage (fixed, or largest angle keeping the
    arm above a manipulability floor, by bisection)."""
    if config.turn_mode == "fixed":
        return config.turn_angle
    if config.turn_mode != "max_manipulability":
        raise ValueError(f"unknown turn mode {config.turn_mode!r}")

    def ok(angle):
        try:
            q = solve_keyframe_ik(bolt.grasp_pose(theta + angle, k), q_start, model, config.ik_iterations)
        except Diverged:
            return False
        return rb.manipulability(model, q) >= config.min_manipulability

    lo, hi = 0.0, config.max_turn_angle
    if ok(hi):
        return hi
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def plan_keyframes(stage: Stage, world: WorldState, bolt: BoltModel, grasp_dir: int,
                   config: PlannerConfig, current_pose: Pose, nominal_pose: Pose,
                   turn_angle: float | None = None) -> KeyframePlan:
    """Keyframes for one stage, built around the nut's current pose."""
    theta = world.nut.theta
    k = grasp_dir
    if stage.tag == StageTag.APPROACH:
        kfs = (
            Keyframe(current_pose, 0.0),
            Keyframe(bolt.grasp_pose(theta, k, config.radial_offset), config.approach_leg),
            Keyframe(bolt.grasp_pose(theta, k), config.approach_leg, "close", config.gripper_window),
        )
    elif stage.tag == StageTag.SCREW:
        angle = config.turn_angle if turn_angle is None else turn_angle
        n = config.screw_segments
        dur = config.screw_duration / n
        kfs = tuple(Keyframe(bolt.grasp_pose(theta + angle * j / n, k), 0.0 if j == 0 else dur)
                    for j in range(n + 1))
    else:
        kfs = (
            Keyframe(bolt.grasp_pose(theta, k), 0.0, "open", config.gripper_window),
            Keyframe(bolt.grasp_pose(theta, k, config.radial_offset), config.approach_leg),
            Keyframe(nominal_pose, config.approach_leg),
        )
    return KeyframePlan(stage, kfs, k)


def solve_plan(plan: KeyframePlan, q_seed, model: ChainModel, iterations: int = 200):
    """Sequential IK over the plan, each solve seeded by the previous one."""
    out = []
    q = np.asarray(q_seed, dtype=float)
    for kf in plan.keyframes:
        q = solve_keyframe_ik(kf, q, model, iterations)
        out.append(q)
    return out


def build_trajectory(plan: KeyframePlan, solved, t0: float = 0.0, config: PlannerConfig | None = None,
                     aperture_before: float | None = None):
    """FOH joint trajectory through the solved knots, plus the gripper
    aperture command trajectory. Arm holds still during gripper windows.

    Returns (JointTrajectory, JointTrajectory for the aperture command).
    """
    config = config or PlannerConfig()
    if len(solved) != len(plan.keyframes):
        raise ValueError("one solved configuration per keyframe required")
    times, knots = [], []
    g_times, g_vals = [], []
    ap = config.open_aperture if aperture_before is None else aperture_before
    t = t0
    g_times.append(t)
    g_vals.append(ap)
    for i, (kf, q) in enumerate(zip(plan.keyframes, solved)):
        if i > 0:
            t += kf.duration_from_prev
        times.append(t)
        knots.append(np.asarray(q, dtype=float))
        if kf.gripper_action != "none":
            target = config.closed_aperture if kf.gripper_action == "close" else config.open_aperture
            if t > g_times[-1]:
                g_times.append(t)
                g_vals.append(ap)
            t += kf.hold
            times.append(t)
            knots.append(np.asarray(q, dtype=float))
            g_times.append(t)
            g_vals.append(target)
            ap = target
    if t > g_times[-1]:
        g_times.append(t)
        g_vals.append(ap)
    return JointTrajectory(times, knots), JointTrajectory(g_times, g_vals)


def plan_duration(plan: KeyframePlan) -> float:
    return float(sum(kf.duration_from_prev + kf.hold for kf in plan.keyframes))


# ---------------------------------------------------------------------------
# stage state machine

@dataclass(frozen=True)
class PlannerState:
    stage: Stage
    turns_commanded: int = 3
    turns_completed: int = 0
    termination: str | None = None  # None while running, else normal | exceptional
    failed_stage: StageTag | None = None

    @property
    def running(self) -> bool:
        return self.termination is None


def advance(state: PlannerState, event: str) -> PlannerState:
    """Greedy progression through the stages; termination is a state."""
    if not state.running:
        return state
    if event == "diverged":
        return replace(state, termination="exceptional", failed_stage=state.stage.tag)
    if event == "turns_done":
        return replace(state, termination="normal")
    if event != "stage_complete":
        raise ValueError(f"unknown planner event {event!r}")
    tag = state.stage.tag
    if tag == StageTag.RETRACT:
        done = state.turns_completed + 1
        if done >= state.turns_commanded:
            return replace(state, turns_completed=done, termination="normal")
        return replace(state, stage=Stage(StageTag.APPROACH, state.stage.turn_index + 1),
                       turns_completed=done)
    return replace(state, stage=Stage(_NEXT[tag], state.stage.turn_index))
