"""Experiment runner: nominal, stiffness-vs-hybrid ablation and randomized
robustness trials, plus the metrics computed from their logs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rigidbody as rb
from .control import ControlMode, Gains, TaskCoordinates, ft_project, hybrid_torques, select_controller
from .planner import (
    JointTrajectory, KeyframePlan, PlannerConfig, PlannerState, PlanningError, Stage, StageTag,
    advance, build_trajectory, plan_duration, plan_keyframes, screw_turn_angle,
    select_grasp_direction, solve_keyframe_ik, solve_plan,
)
from .rigidbody import ChainModel
from .spatial import Pose, cross3, rotate_6, rotation_angle, rotvec_from_matrix
from .world import BoltModel, NonFinite, NutState, World, WorldConfig, WorldState, Wrench

log = logging.getLogger(__name__)

SCENARIOS = ("nominal", "ablation", "robustness")
VARIANTS = ("baseline", "hybrid")

# bolt axis along world +x; palm facing down with fingers closing along world y
BOLT_ROTATION = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
START_ROTATION = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
START_SEED = np.array([0.0, 0.6, 0.0, -1.5, 0.0, 1.0, 0.5 * math.pi])

STAGE_CODES = {StageTag.APPROACH: 0, StageTag.SCREW: 1, StageTag.RETRACT: 2}
STAGE_NAMES = {v: k.value for k, v in STAGE_CODES.items()}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "nominal"
    seed: int = 0
    disturbance_limit: float = 0.0
    limits: tuple = (0.10, 0.125, 0.15)
    n_trials: int = 10
    turn_count: int = 3
    dt: float = 1e-4
    gains: Gains = field(default_factory=Gains)
    bolt: BoltModel = field(default_factory=lambda: BoltModel(Pose(BOLT_ROTATION, np.array([0.6, 0.0, 0.2]))))
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    gripper_start: tuple = (0.5, 0.0, 0.4)
    log_every: int = 10  # steps between logged samples
    out_dir: str | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.disturbance_limit < 0 or any(l < 0 for l in self.limits):
            raise ConfigError("disturbance limits must be non-negative")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be at least 1")
        if self.turn_count < 1:
            raise ConfigError("turn_count must be at least 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be at least 1")


@dataclass
class TrialLog:
    """Per-sample records. ``data`` rows follow ``columns``."""
    columns: list
    data: np.ndarray

    def __getitem__(self, name):
        return self.data[:, self.columns.index(name)]

    def __len__(self):
        return self.data.shape[0]


@dataclass
class TrialResult:
    variant: str
    success: bool
    turns_completed: int
    termination: str  # normal | exceptional | nonfinite
    failed_stage: str | None
    pitch_progress: float
    mean_my: list  # per screw stage, signed mean of sensed M_y
    mean_abs_my: list
    peak_my: float
    state_log: TrialLog
    controller_log: TrialLog
    stages: list  # (turn, tag, t_start, t_end)
    plan_checksums: list
    disturbance: np.ndarray


# ---------------------------------------------------------------------------
# scene

def nominal_configuration(model: ChainModel, position) -> np.ndarray:
    return solve_keyframe_ik(Pose(START_ROTATION, np.asarray(position, dtype=float)), START_SEED, model)


@dataclass
class PlannedStage:
    stage: Stage
    plan: KeyframePlan
    solved: list
    trajectory: JointTrajectory  # local time, starts at 0
    aperture: JointTrajectory
    duration: float
    theta: float  # measured nut angle at planning time
    turn_angle: float


class Sequencer:
    """Plans each stage at its transition from the current world state.

    Planning is greedy: no replanning inside a stage and no use of force
    feedback. Plans are cached on (stage, nut angle, configuration, home
    pose, grasp direction), so two controllers reaching bit-identical
    states consume the very same plan objects.
    """

    def __init__(self, model: ChainModel, bolt: BoltModel, config: PlannerConfig):
        self.model, self.bolt, self.config = model, bolt, config
        self._cache: dict = {}

    def plan(self, stage: Stage, state: WorldState, home_pose: Pose, grasp_dir: int | None = None) -> PlannedStage:
        key = (stage, float(state.nut.theta), state.q.tobytes(), home_pose.as_vector().tobytes(), grasp_dir)
        hit = self._cache.get(key)
        if isinstance(hit, PlanningError):
            raise hit
        if hit is None:
            try:
                hit = self._build(stage, state, home_pose, grasp_dir)
            except PlanningError as exc:
                self._cache[key] = exc
                raise
            self._cache[key] = hit
        return hit

    @property
    def planned(self):
        return [v for v in self._cache.values() if isinstance(v, PlannedStage)]

    def _build(self, stage: Stage, state: WorldState, home_pose: Pose, k: int | None) -> PlannedStage:
        cfg, bolt, model = self.config, self.bolt, self.model
        theta = state.nut.theta
        q_now = state.q
        angle = 0.0
        if stage.tag == StageTag.APPROACH:
            k, _ = select_grasp_direction(bolt, theta, q_now, model, cfg.ik_iterations)
            aperture_before = cfg.open_aperture
        elif stage.tag == StageTag.SCREW:
            angle = cfg.turn_angle
            if cfg.turn_mode == "max_manipulability":
                angle = screw_turn_angle(bolt, theta, k, q_now, model, cfg)
            aperture_before = cfg.closed_aperture
        else:
            aperture_before = cfg.closed_aperture
        current = rb.forward_kinematics(model, q_now)
        plan = plan_keyframes(stage, state, bolt, k, cfg, current, home_pose, turn_angle=angle)
        solved = solve_plan(plan, q_now, model, cfg.ik_iterations)
        traj, ap = build_trajectory(plan, solved, 0.0, cfg, aperture_before)
        return PlannedStage(stage, plan, solved, traj, ap, plan_duration(plan), theta, angle)


# ---------------------------------------------------------------------------
# trials

def sensed_manipuland_wrench(state: WorldState, R_G, p_G, R_WM, p_WM) -> Wrench:
    """F/T reading re-expressed in the manipuland frame about its origin.

    Same result as ft_project(world.sense_wrench(state), ...), computed from
    the stored world-frame contact wrench without intermediate poses.
    """
    if not state.grasped:
        return Wrench(np.zeros(6), "manipuland")
    w = state.contact_wrench
    m_W = w[:3] + cross3(p_G - p_WM, w[3:])
    return Wrench(np.concatenate([R_WM.T @ m_W, R_WM.T @ w[3:]]), "manipuland")


STATE_COLUMNS = (["time", "stage", "turn"] + [f"q{i}" for i in range(7)] + [f"qdot{i}" for i in range(7)]
                 + ["gripper_aperture", "nut_theta", "nut_theta_dot", "y_advance", "grasped"]
                 + [f"wrench{i}" for i in range(6)] + ["my_manipuland", "translation_error", "rotation_error"])
CONTROLLER_COLUMNS = (["time", "mode"] + [f"tau{i}" for i in range(7)] + [f"task_error{i}" for i in range(6)]
                      + [f"rho{i}" for i in range(6)] + ["rho_d2", "null_torque_norm"])


def _disturbances(config: ExperimentConfig, limit: float, trial: int = 0):
    """Independent per-axis U[-l, l] offsets for the gripper start and the nut."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, trial])))
    d = rng.uniform(-limit, limit, size=(2, 3))
    return d[0], d[1]


def prepare_trial(config: ExperimentConfig, model: ChainModel | None = None, limit: float | None = None,
                  trial: int = 0):
    """Disturbed scene for one trial: (world, sequencer, q_start, q_nominal, disturbance).

    Returns sequencer None when the disturbed start pose has no IK solution.
    """
    model = model or rb.default_model()
    limit = config.disturbance_limit if limit is None else limit
    d_grip, d_nut = _disturbances(config, limit, trial)
    bolt = config.bolt
    bolt = replace(bolt, base_pose=Pose(bolt.base_pose.rotation, bolt.base_pose.translation + d_nut))
    world = World(model, bolt, WorldConfig(dt=config.dt))
    q_nominal = nominal_configuration(model, config.gripper_start)
    start = Pose(START_ROTATION, np.asarray(config.gripper_start, dtype=float) + d_grip)
    try:
        q_start = solve_keyframe_ik(start, q_nominal, model)
    except PlanningError:
        return world, None, q_nominal, q_nominal, np.concatenate([d_grip, d_nut])
    return world, Sequencer(model, bolt, config.planner), q_start, q_nominal, np.concatenate([d_grip, d_nut])


def run_trial(config: ExperimentConfig, variant: str = "hybrid", *, limit: float | None = None,
              trial: int = 0, prepared=None) -> TrialResult:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown controller variant {variant!r}")
    world, seq, q_start, q_nominal, dist = prepared or prepare_trial(config, limit=limit, trial=trial)
    model, bolt, gains, dt = world.model, world.bolt, config.gains, config.dt
    state = world.initial_state(q_start)
    theta0 = state.nut.theta
    pstate = PlannerState(Stage(StageTag.APPROACH, 0), config.turn_count)
    rows, crows, stages, checksums = [], [], [], []
    termination = None
    if seq is None:
        pstate = advance(pstate, "diverged")
    info: dict = {}
    home = rb.forward_kinematics(model, q_start)
    grasp_dir = None
    while pstate.running:
        stage = pstate.stage
        try:
            if stage.tag == StageTag.APPROACH:
                home = rb.forward_kinematics(model, state.q)
            ps = seq.plan(stage, state, home, grasp_dir)
            grasp_dir = ps.plan.grasp_dir
        except PlanningError as exc:
            log.info("planning failed at %s turn %d: %s", stage.tag.value, stage.turn_index, exc)
            pstate = advance(pstate, "diverged")
            break
        checksums.append((stage.tag.value, stage.turn_index, ps.trajectory.checksum()))
        t0 = state.time
        n_steps = int(round(ps.duration / dt))
        code = STAGE_CODES[stage.tag]
        try:
            for i in range(n_steps):
                tl = i * dt
                q_d, qd_d = ps.trajectory.sample(tl)
                terms = world.dynamics_terms(state.q, state.qdot)
                R_G, p_G, J, _, M, _, grav = terms
                mode = select_controller(stage, state.grasped) if variant == "hybrid" else ControlMode.STIFFNESS
                logging_step = i % config.log_every == 0
                if mode == ControlMode.HYBRID or logging_step:
                    R_Gd, p_Gd = rb.tool_frame(model, q_d)
                    R_WM, p_WM = bolt.nut_frame(state.nut.theta)
                    rho = sensed_manipuland_wrench(state, R_G, p_G, R_WM, p_WM)
                if mode == ControlMode.HYBRID:
                    R_MW = R_WM.T
                    J_M = rotate_6(R_MW) @ J
                    J_Md = rotate_6(R_MW) @ rb.jacobian(model, q_d)
                    x_s = TaskCoordinates(np.concatenate([rotvec_from_matrix(R_MW @ R_G), R_MW @ (p_G - p_WM)]),
                                          J_M @ state.qdot)
                    x_d = TaskCoordinates(np.concatenate([rotvec_from_matrix(R_MW @ R_Gd), R_MW @ (p_Gd - p_WM)]),
                                          J_Md @ qd_d)
                    tau = hybrid_torques(model, state.q, state.qdot, x_d, x_s, rho, q_nominal, gains,
                                         J=J_M, tau0=grav, info=info)
                    task_err = info["e_pos"] + info["e_rate"]
                    null_norm = float(np.linalg.norm(info["tau_null"]))
                else:
                    tau = grav + M @ (gains.kp * (q_d - state.q) + gains.kd * (qd_d - state.qdot))
                    task_err = np.zeros(6)
                    null_norm = 0.0
                if logging_step:
                    w = state.contact_wrench
                    w = np.concatenate([R_G.T @ w[:3], R_G.T @ w[3:]])
                    nut = state.nut
                    rows.append((state.time, code, stage.turn_index, *state.q, *state.qdot,
                                 state.gripper_aperture, nut.theta, nut.theta_dot, nut.y_advance,
                                 float(state.grasped), *w, rho.values[1],
                                 float(np.linalg.norm(p_Gd - p_G)), rotation_angle(R_Gd.T @ R_G)))
                    crows.append((state.time, 1.0 if mode == ControlMode.HYBRID else 0.0, *tau, *task_err,
                                  *rho.values, gains.desired_moment if mode == ControlMode.HYBRID else 0.0,
                                  null_norm))
                state = world.step(state, tau, float(ps.aperture.value(tl)[0]), dt, terms)
        except NonFinite as exc:
            log.info("simulation blew up: %s", exc)
            termination = "nonfinite"
            stages.append((stage.turn_index, stage.tag.value, t0, state.time))
            break
        stages.append((stage.turn_index, stage.tag.value, t0, state.time))
        pstate = advance(pstate, "stage_complete")
    if termination is None:
        termination = pstate.termination
    failed = pstate.failed_stage.value if pstate.failed_stage is not None else (
        pstate.stage.tag.value if termination == "nonfinite" else None)
    slog = TrialLog(list(STATE_COLUMNS), np.array(rows, dtype=float).reshape(-1, len(STATE_COLUMNS)))
    clog = TrialLog(list(CONTROLLER_COLUMNS), np.array(crows, dtype=float).reshape(-1, len(CONTROLLER_COLUMNS)))
    m = compute_metrics(slog)
    return TrialResult(
        variant=variant, success=pstate.turns_completed >= 1, turns_completed=pstate.turns_completed,
        termination=termination, failed_stage=failed, pitch_progress=state.nut.theta - theta0,
        mean_my=m["mean_my"], mean_abs_my=m["mean_abs_my"], peak_my=m["peak_my"],
        state_log=slog, controller_log=clog, stages=stages, plan_checksums=checksums, disturbance=dist,
    )


# ---------------------------------------------------------------------------
# metrics

def _screw_segments(state_log: TrialLog):
    """Index arrays of consecutive screw-stage samples, one per turn."""
    stage = state_log["stage"]
    turn = state_log["turn"]
    out = []
    for t in np.unique(turn[stage == STAGE_CODES[StageTag.SCREW]]):
        idx = np.flatnonzero((stage == STAGE_CODES[StageTag.SCREW]) & (turn == t))
        if idx.size:
            out.append(idx)
    return out


def least_squares_slope(t, y) -> float:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < 2:
        return 0.0
    tc = t - t.mean()
    den = tc @ tc
    return float(tc @ (y - y.mean()) / den) if den > 0 else 0.0


def averaged_screw_profile(state_log: TrialLog):
    """Sensed M_y against time since screw-stage start, averaged over turns."""
    segs = _screw_segments(state_log)
    if not segs:
        return np.zeros(0), np.zeros(0)
    n = min(s.size for s in segs)
    t = state_log["time"]
    my = state_log["my_manipuland"]
    tau = t[segs[0][:n]] - t[segs[0][0]]
    return tau, np.mean([my[s[:n]] for s in segs], axis=0)


def compute_metrics(state_log: TrialLog) -> dict:
    """Pitch progress, per-screw-stage M_y statistics and tracking errors."""
    if len(state_log) == 0:
        return dict(pitch_progress=0.0, mean_my=[], mean_abs_my=[], peak_my=0.0, my_slope=0.0,
                    translation_error=np.zeros(0), rotation_error=np.zeros(0))
    theta = state_log["nut_theta"]
    my = state_log["my_manipuland"]
    segs = _screw_segments(state_log)
    tp, prof = averaged_screw_profile(state_log)
    return dict(
        pitch_progress=float(theta[-1] - theta[0]),
        mean_my=[float(my[s].mean()) for s in segs],
        mean_abs_my=[float(np.abs(my[s]).mean()) for s in segs],
        peak_my=float(max((np.abs(my[s]).max() for s in segs), default=0.0)),
        my_slope=least_squares_slope(tp, prof),
        translation_error=state_log["translation_error"].copy(),
        rotation_error=state_log["rotation_error"].copy(),
    )


# ---------------------------------------------------------------------------
# experiments

@dataclass
class AblationReport:
    baseline: TrialResult
    hybrid: TrialResult
    pitch_advantage: float  # hybrid over baseline, fraction of baseline progress
    peak_ratio: float  # baseline peak |M_y| over hybrid peak |M_y|
    baseline_slope: float
    hybrid_slope: float
    shared_stages: int  # leading stages both controllers ran on the same plan

    def summary_rows(self):
        return [
            ("pitch_advantage_percent", 100.0 * self.pitch_advantage),
            ("peak_my_ratio_baseline_over_hybrid", self.peak_ratio),
            ("baseline_my_slope", self.baseline_slope),
            ("hybrid_my_slope", self.hybrid_slope),
            ("shared_plan_stages", self.shared_stages),
        ]


def run_ablation(config: ExperimentConfig, prepared=None) -> AblationReport:
    """Both controllers from the same initial state on the same plans."""
    prepared = prepared or prepare_trial(config)
    base = run_trial(config, "baseline", prepared=prepared)
    hyb = run_trial(config, "hybrid", prepared=prepared)
    mb, mh = compute_metrics(base.state_log), compute_metrics(hyb.state_log)
    adv = (hyb.pitch_progress - base.pitch_progress) / base.pitch_progress if base.pitch_progress else math.nan
    ratio = mb["peak_my"] / mh["peak_my"] if mh["peak_my"] > 0 else math.inf
    shared = 0
    for cb, ch in zip(base.plan_checksums, hyb.plan_checksums):
        if cb != ch:
            break
        shared += 1
    return AblationReport(base, hyb, adv, ratio, mb["my_slope"], mh["my_slope"], shared)


def _empty_log(columns):
    return TrialLog(list(columns), np.zeros((0, len(columns))))


@dataclass
class RobustnessRow:
    limit: float
    trials: int
    successes: int
    failures: dict  # "<termination>@<stage>" -> count

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials


def run_robustness(config: ExperimentConfig, variant: str = "hybrid", progress=None, keep_logs=False):
    """Success rate per disturbance limit, n_trials each.

    Returns (rows, per-trial records (limit, trial, TrialResult)). Unless
    ``keep_logs`` is set the records carry empty logs.
    """
    model = rb.default_model()
    rows, records = [], []
    for limit in config.limits:
        ok, failures = 0, {}
        for i in range(config.n_trials):
            res = run_trial(config, variant, prepared=prepare_trial(config, model, limit, i))
            if not keep_logs:
                res = replace(res, state_log=_empty_log(STATE_COLUMNS), controller_log=_empty_log(CONTROLLER_COLUMNS))
            records.append((limit, i, res))
            if res.success:
                ok += 1
            if res.termination != "normal":
                key = f"{res.termination}@{res.failed_stage}"
                failures[key] = failures.get(key, 0) + 1
            if progress:
                progress(limit, i, res)
        rows.append(RobustnessRow(limit, config.n_trials, ok, failures))
    return rows, records
