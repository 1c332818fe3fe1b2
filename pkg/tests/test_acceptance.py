"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import math
import time
import warnings

import numpy as np
import pytest

from nutbot import rigidbody as rb
from nutbot.cli import main
from nutbot.control import Gains, TaskCoordinates, hybrid_torques, null_space_projector, stiffness_torques
from nutbot.harness import STAGE_CODES, ExperimentConfig, compute_metrics, prepare_trial, run_ablation, run_robustness
from nutbot.planner import ROTATION_TOL, TRANSLATION_TOL, StageTag, pose_error
from nutbot.spatial import rotvec_from_matrix
from nutbot.world import Wrench

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")

PITCH = 0.008  # m per revolution


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def ablation():
    cfg = ExperimentConfig(scenario="ablation")
    prepared = prepare_trial(cfg)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = run_ablation(cfg, prepared)
    return rep, prepared[1], time.perf_counter() - t0


def test_dynamics_identities(capsys):
    t0 = time.perf_counter()
    model = rb.default_model()
    rng = np.random.default_rng(2024)
    h = 1e-6
    worst_sym = worst_jac = 0.0
    min_eig = math.inf
    for _ in range(1000):
        q = rng.uniform(model.lower, model.upper)
        M = rb.mass_matrix(model, q)
        worst_sym = max(worst_sym, np.abs(M - M.T).max())
        min_eig = min(min_eig, np.linalg.eigvalsh(0.5 * (M + M.T)).min())
        J = rb.jacobian(model, q)
        for j in range(7):
            dq = np.zeros(7)
            dq[j] = h
            Xp, Xm = rb.forward_kinematics(model, q + dq), rb.forward_kinematics(model, q - dq)
            fd = np.concatenate([rotvec_from_matrix(Xp.rotation @ Xm.rotation.T),
                                 Xp.translation - Xm.translation]) / (2 * h)
            worst_jac = max(worst_jac, np.abs(J[:, j] - fd).max())
    free = model.with_gravity(np.zeros(3))
    q = np.array([0.3, 0.6, -0.4, -1.2, 0.5, 0.8, 0.0])
    qd = np.array([0.4, -0.3, 0.2, 0.5, -0.4, 0.3, 0.2])
    E0 = 0.5 * qd @ rb.mass_matrix(free, q) @ qd
    dt = 1e-4
    for _ in range(10000):
        qd = qd + dt * rb.forward_dynamics(free, q, qd, np.zeros(7))
        q = q + dt * qd
    drift = abs(0.5 * qd @ rb.mass_matrix(free, q) @ qd - E0) / E0
    elapsed = time.perf_counter() - t0
    ok = worst_sym < 1e-10 and min_eig > 0 and worst_jac < 1e-6 and drift < 1e-3 and elapsed < 30
    report(capsys, "dynamics identities", ok,
           f"|M-M^T|max={worst_sym:.1e} min eig={min_eig:.3e} jacobian fd err={worst_jac:.1e} "
           f"energy drift={100 * drift:.4f}% runtime={elapsed:.1f}s")


def test_ik_tolerance_on_every_knot(capsys, ablation):
    rep, seq, _ = ablation
    model = seq.model
    worst_t = worst_r = 0.0
    knots = 0
    for ps in seq.planned:
        for kf, q in zip(ps.plan.keyframes, ps.solved):
            dt, dr = pose_error(model, q, kf.pose)
            worst_t = max(worst_t, np.abs(dt).max())
            worst_r = max(worst_r, np.abs(dr).max())
            knots += 1
    ok = knots > 0 and worst_t < TRANSLATION_TOL and worst_r < ROTATION_TOL and rep.hybrid.turns_completed == 3
    report(capsys, "IK tolerance", ok,
           f"{knots} knots, worst translation {1000 * worst_t:.3f} mm, worst rotation {math.degrees(worst_r):.4f} deg")


def test_screw_coupling_exact(capsys, ablation):
    rep = ablation[0]
    worst = 0.0
    n = 0
    for res in (rep.baseline, rep.hybrid):
        log = res.state_log
        worst = max(worst, np.abs(log["y_advance"] - log["nut_theta"] * (PITCH / (2 * math.pi))).max())
        n += len(log)
    report(capsys, "screw coupling", worst == 0.0, f"max |y - theta*p/2pi| = {worst:.1e} over {n} samples")


def _screw_my(res):
    log = res.state_log
    return log["my_manipuland"][log["stage"] == STAGE_CODES[StageTag.SCREW]]


def test_hybrid_force_regulation(capsys, ablation):
    rep = ablation[0]
    target = Gains().desired_moment
    mean = float(_screw_my(rep.hybrid).mean())
    flat = rep.baseline_slope > 0 and abs(rep.hybrid_slope) < 0.1 * rep.baseline_slope
    ok = abs(mean - target) <= 0.2 * target and flat
    report(capsys, "hybrid force regulation", ok,
           f"mean screw M_y {mean:.4f} N m (target {target} +/- 20%), slope hybrid {rep.hybrid_slope:.3e} "
           f"vs baseline {rep.baseline_slope:.3e} N m/s (need < 10%)")


def test_ablation_ordering(capsys, ablation):
    rep, _, elapsed = ablation
    b, h = rep.baseline, rep.hybrid
    ok = h.pitch_progress >= b.pitch_progress and rep.peak_ratio >= 5 and elapsed < 300
    report(capsys, "ablation ordering", ok,
           f"pitch hybrid {h.pitch_progress:.4f} vs baseline {b.pitch_progress:.4f} rad "
           f"({100 * rep.pitch_advantage:+.2f}%), peak |M_y| ratio {rep.peak_ratio:.2f} (need >= 5), "
           f"runtime {elapsed:.0f}s")


def test_robustness_table(capsys):
    cfg = ExperimentConfig(scenario="robustness")
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rows, _ = run_robustness(cfg)
    elapsed = time.perf_counter() - t0
    rates = [r.success_rate for r in rows]
    failure_kinds = set().union(*(r.failures for r in rows))
    ok = (rates[0] >= 0.8 and all(a >= b for a, b in zip(rates, rates[1:]))
          and failure_kinds <= {"exceptional@Retract"} and elapsed < 1800)
    table = ", ".join(f"l={r.limit}: {r.successes}/{r.trials}" for r in rows)
    report(capsys, "robustness table", ok,
           f"{table}; failures {sorted(failure_kinds) or 'none'}; runtime {elapsed / 60:.1f} min")


def test_controller_fixed_points(capsys):
    model = rb.default_model()
    g = Gains()
    rng = np.random.default_rng(11)
    exact = True
    worst = 0.0
    for _ in range(100):
        q = rng.uniform(model.lower * 0.95, model.upper * 0.95)
        qd = rng.uniform(-0.5, 0.5, 7)
        tau0 = rb.gravity_torque(model, q)
        exact &= bool(np.array_equal(stiffness_torques(model, q, qd, q, qd, g, tau0=tau0), tau0))
        J = rb.jacobian(model, q)
        x = TaskCoordinates(rng.normal(size=6), rng.normal(size=6))
        rho = Wrench(np.array([0.0, g.desired_moment, 0, 0, 0, 0]), "manipuland")
        exact &= bool(np.array_equal(
            hybrid_torques(model, q, np.zeros(7), x, x, rho, q, g, J=J, tau0=tau0), tau0))
        N, _ = null_space_projector(J, g)
        worst = max(worst, np.abs(J @ N).max())
    report(capsys, "controller fixed points", exact and worst < 1e-9,
           f"zero-error torques equal tau0 exactly: {exact}; max |J N| = {worst:.1e}")


def test_determinism(capsys, tmp_path):
    args = ["run", "--turns", "1", "--seed", "3", "--limit", "0.05"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    same = names == sorted(p.name for p in b.iterdir()) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in names)
    report(capsys, "determinism", same and "state_log.csv" in names, f"{len(names)} files compared byte for byte")
