"""CSV and SVG emission for trial logs, metrics and figure data.

Floats are written with repr() so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .harness import STAGE_NAMES, TrialResult, averaged_screw_profile, compute_metrics

STAGE_COLORS = {"Approach": "#dbe9f6", "Screw": "#fde4c8", "Retract": "#e2f0d9"}
SERIES_COLORS = {"baseline": "#c0392b", "hybrid": "#1f77b4"}


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def write_state_log(path, results):
    cols = results[0].state_log.columns
    rows = []
    for res in results:
        for rec in res.state_log.data:
            out = [res.variant]
            for name, v in zip(cols, rec):
                if name == "stage":
                    out.append(STAGE_NAMES[int(v)])
                elif name in ("turn", "grasped"):
                    out.append(int(v))
                else:
                    out.append(float(v))
            rows.append(out)
    return write_csv(path, ["variant"] + cols, rows)


def write_controller_log(path, results):
    cols = results[0].controller_log.columns
    rows = []
    for res in results:
        for rec in res.controller_log.data:
            out = [res.variant]
            for name, v in zip(cols, rec):
                out.append(("Hybrid" if v else "Stiffness") if name == "mode" else float(v))
            rows.append(out)
    return write_csv(path, ["variant"] + cols, rows)


def metrics_rows(res: TrialResult):
    m = compute_metrics(res.state_log)
    te, re = m["translation_error"], m["rotation_error"]
    rows = [
        ("success", int(res.success)),
        ("turns_completed", res.turns_completed),
        ("termination", res.termination),
        ("failed_stage", res.failed_stage or ""),
        ("pitch_progress", res.pitch_progress),
        ("peak_abs_my", m["peak_my"]),
        ("my_slope", m["my_slope"]),
        ("max_translation_error", float(te.max()) if te.size else 0.0),
        ("mean_translation_error", float(te.mean()) if te.size else 0.0),
        ("max_rotation_error", float(re.max()) if re.size else 0.0),
        ("mean_rotation_error", float(re.mean()) if re.size else 0.0),
    ]
    for i, (mm, ma) in enumerate(zip(m["mean_my"], m["mean_abs_my"])):
        rows.append((f"mean_my_screw{i}", mm))
        rows.append((f"mean_abs_my_screw{i}", ma))
    return rows


def write_metrics(path, results, extra=()):
    rows = [(res.variant, k, v) for res in results for k, v in metrics_rows(res)]
    rows += [("all", k, v) for k, v in extra]
    return write_csv(path, ["variant", "metric", "value"], rows)


def write_stages(path, results):
    rows = [(res.variant, turn, tag, t0, t1) for res in results for turn, tag, t0, t1 in res.stages]
    return write_csv(path, ["variant", "turn", "stage", "t_start", "t_end"], rows)


def write_plan_dump(path, sequencer):
    """One row per keyframe of every stage the sequencer has planned."""
    rows = []
    order = {"Approach": 0, "Screw": 1, "Retract": 2}
    for ps in sorted(sequencer.planned, key=lambda p: (p.stage.turn_index, order[p.stage.tag.value])):
        stage = ps.stage
        for i, (kf, q) in enumerate(zip(ps.plan.keyframes, ps.solved)):
            rows.append((stage.tag.value, stage.turn_index, i, *kf.pose.as_vector(), kf.duration_from_prev,
                         kf.gripper_action, *q))
    header = (["stage", "turn", "index", "qw", "qx", "qy", "qz", "x", "y", "z", "duration", "gripper_action"]
              + [f"q{i}" for i in range(7)])
    return write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# figures

def figure_series(results):
    """Tidy rows for the pitch, M_y profile and tracking-error figures."""
    fig6, fig7, fig8a, fig8b = [], [], [], []
    for res in results:
        log = res.state_log
        if len(log) == 0:
            continue
        t = log["time"]
        th = log["nut_theta"] - log["nut_theta"][0]
        fig6 += [(res.variant, a, b) for a, b in zip(t, th)]
        tp, prof = averaged_screw_profile(log)
        fig7 += [(res.variant, a, b) for a, b in zip(tp, prof)]
        fig8a += [(res.variant, a, b) for a, b in zip(t, log["translation_error"])]
        fig8b += [(res.variant, a, b) for a, b in zip(t, log["rotation_error"])]
    return fig6, fig7, fig8a, fig8b


def _thin(xs, ys, limit=1500):
    step = max(1, len(xs) // limit)
    return xs[::step], ys[::step]


def svg_plot(path, title, xlabel, ylabel, series, bands=(), width=720, height=360):
    """Line chart. series: {name: (x, y)}; bands: (t0, t1, stage name) shaded behind."""
    ml, mr, mt, mb = 70, 20, 30, 45
    xs = [v for x, _ in series.values() for v in x]
    ys = [v for _, y in series.values() for v in y]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for a, b, name in bands:
        a, b = max(a, x0), min(b, x1)
        if b > a:
            out.append(f'<rect x="{px(a):.2f}" y="{mt}" width="{px(b) - px(a):.2f}" height="{ph}" '
                       f'fill="{STAGE_COLORS.get(name, "#eeeeee")}"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for i in range(6):
        xv = x0 + (x1 - x0) * i / 5
        yv = y0 + (y1 - y0) * i / 5
        out.append(f'<text x="{px(xv):.2f}" y="{height - mb + 15}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{ml - 5}" y="{py(yv) + 4:.2f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2})">{ylabel}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>')
    for k, (name, (x, y)) in enumerate(series.items()):
        x, y = _thin(list(x), list(y))
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if math.isfinite(b))
        color = SERIES_COLORS.get(name, "#333333")
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        out.append(f'<text x="{ml + pw - 90}" y="{mt + 15 + 14 * k}" fill="{color}">{name}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
    return Path(path)


def _by_variant(rows):
    series = {}
    for v, x, y in rows:
        series.setdefault(v, ([], []))
        series[v][0].append(x)
        series[v][1].append(y)
    return series


def write_figures(out_dir, results):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig6, fig7, fig8a, fig8b = figure_series(results)
    bands = [(t0, t1, tag) for _, tag, t0, t1 in results[0].stages] if results else []
    specs = [
        ("fig6", fig6, ["variant", "time", "pitch"], "Nut pitch angle", "time (s)", "pitch (rad)", bands),
        ("fig7", fig7, ["variant", "stage_time", "my"], "Screw-stage M_y averaged over turns",
         "time since screw start (s)", "M_y (N m)", ()),
        ("fig8a", fig8a, ["variant", "time", "translation_error"], "Translation tracking error", "time (s)",
         "error (m)", bands),
        ("fig8b", fig8b, ["variant", "time", "rotation_error"], "Rotation tracking error", "time (s)",
         "error (rad)", bands),
    ]
    for name, rows, header, title, xl, yl, bd in specs:
        write_csv(out_dir / f"{name}.csv", header, rows)
        svg_plot(out_dir / f"{name}.svg", title, xl, yl, _by_variant(rows), bd)


def write_trial_outputs(out_dir, results, extra_metrics=()):
    out_dir = Path(out_dir)
    write_state_log(out_dir / "state_log.csv", results)
    write_controller_log(out_dir / "controller_log.csv", results)
    write_metrics(out_dir / "metrics.csv", results, extra_metrics)
    write_stages(out_dir / "stages.csv", results)
    write_figures(out_dir, results)
