"""Edge- and object-alignment metrics and success-rate aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose2D, normalize_angle

TRANSLATION_TOL_M = 0.3
EDGE_TOL_DEG = 8.0
# bounds are inclusive; the slack keeps a pose that sits on a bound up to
# floating-point roundoff (e.g. 1.1 - 0.8) on the inside
BOUND_SLACK = 1e-9


class EmptyMask(ValueError):
    pass


class ValidationError(ValueError):
    pass


def mask_com(mask: np.ndarray) -> tuple[float, float]:
    """Mean (u, v) = (column, row) of the set cells."""
    rows, cols = np.nonzero(np.asarray(mask))
    if rows.size == 0:
        raise EmptyMask("centre of mass of an empty mask")
    return float(cols.mean()), float(rows.mean())


def d_com(c_goal, c_final) -> float:
    return math.hypot(c_goal[0] - c_final[0], c_goal[1] - c_final[1])


@dataclass(frozen=True)
class EdgeFlags:
    translation_error: float
    orientation_error_deg: float
    translation_ok: bool
    edge_aligned: bool


def edge_alignment(final: Pose2D, goal: Pose2D, translation_tol: float = TRANSLATION_TOL_M,
                   orientation_tol_deg: float = EDGE_TOL_DEG) -> EdgeFlags:
    err = math.hypot(final.x - goal.x, final.y - goal.y)
    dth = abs(math.degrees(normalize_angle(goal.theta - final.theta)))
    t_ok = err <= translation_tol + BOUND_SLACK
    return EdgeFlags(err, dth, t_ok, t_ok and dth <= orientation_tol_deg + BOUND_SLACK)


def object_alignment(final_com, goal_com, com_radius: float, translation_ok: bool) -> tuple[bool, float | None]:
    """Flag plus the CoM distance; a missing (None) CoM on either side fails."""
    if final_com is None or goal_com is None:
        return False, None
    dist = d_com(goal_com, final_com)
    return bool(translation_ok and dist <= com_radius + BOUND_SLACK), dist


@dataclass
class RolloutMetrics:
    start_index: int
    translation_error_m: float
    orientation_error_deg: float
    d_com_cells: float | None
    translation_ok: bool
    edge_aligned: bool
    object_aligned: bool
    timed_out: bool = False


@dataclass
class MetricReport:
    rollouts: list[RolloutMetrics]
    edge_success_rate: float
    object_success_rate: float
    translation_success_rate: float
    counts: dict
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "edge_success_rate": self.edge_success_rate,
            "object_success_rate": self.object_success_rate,
            "translation_success_rate": self.translation_success_rate,
            "counts": self.counts,
            "meta": self.meta,
            "rollouts": [asdict(r) for r in self.rollouts],
        }
        return json.dumps(d, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["startIndex", "translationError_m", "orientationError_deg", "dCoM_cells",
                    "translationOk", "edgeAligned", "objectAligned"])
        for r in self.rollouts:
            w.writerow([r.start_index, f"{r.translation_error_m:.6f}", f"{r.orientation_error_deg:.6f}",
                        "" if r.d_com_cells is None else f"{r.d_com_cells:.6f}",
                        int(r.translation_ok), int(r.edge_aligned), int(r.object_aligned)])
        return buf.getvalue()


def _termination_name(log) -> str | None:
    term = getattr(log, "termination", None)
    return getattr(term, "value", term)


def aggregate(logs, com_radius: float, translation_tol: float = TRANSLATION_TOL_M,
              orientation_tol_deg: float = EDGE_TOL_DEG) -> MetricReport:
    """Score rollout logs (objects with start_index, final_pose, goal_pose, final/goal CoM).

    A rollout that ran into the step cap counts as a failure in both settings,
    wherever it happened to end up.
    """
    if not logs:
        raise ValidationError("no rollout logs")
    grids = {getattr(log, "grid_id", None) for log in logs}
    if len(grids) > 1:
        raise ValidationError(f"logs come from different start grids: {sorted(map(str, grids))}")
    idx = [log.start_index for log in logs]
    if len(set(idx)) != len(idx):
        raise ValidationError("duplicate start indices")
    rows = []
    for log in sorted(logs, key=lambda lg: lg.start_index):
        e = edge_alignment(log.final_pose, log.goal_pose, translation_tol, orientation_tol_deg)
        obj, dist = object_alignment(log.final_com, log.goal_com, com_radius, e.translation_ok)
        timed_out = _termination_name(log) == "MaxSteps"
        rows.append(RolloutMetrics(log.start_index, e.translation_error, e.orientation_error_deg,
                                   dist, e.translation_ok, e.edge_aligned and not timed_out,
                                   obj and not timed_out, timed_out))
    n = len(rows)
    counts = {
        "rollouts": n,
        "translation_ok": sum(r.translation_ok for r in rows),
        "edge_aligned": sum(r.edge_aligned for r in rows),
        "object_aligned": sum(r.object_aligned for r in rows),
        "timed_out": sum(r.timed_out for r in rows),
    }
    return MetricReport(
        rows,
        counts["edge_aligned"] / n,
        counts["object_aligned"] / n,
        counts["translation_ok"] / n,
        counts,
        {"com_radius": com_radius, "translation_tol_m": translation_tol,
         "orientation_tol_deg": orientation_tol_deg, "grid_id": next(iter(grids))},
    )


def bar_chart_svg(groups: dict[str, dict[str, float]], title: str = "Success rate") -> str:
    """Two panels (edge / object alignment), one bar per policy, rates in [0, 1]."""
    panels = ("edge", "object")
    names = list(groups)
    bw, gap, ph, pw = 36, 14, 200, max(160, len(names) * 50 + 40)
    width = 2 * pw + 60
    height = ph + 110
    palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="13">{title}</text>']
    for pi, panel in enumerate(panels):
        x0 = 40 + pi * (pw + 20)
        y0 = 30
        out.append(f'<text x="{x0 + pw / 2}" y="{y0 + 10}" text-anchor="middle">{panel} alignment</text>')
        out.append(f'<line x1="{x0}" y1="{y0 + 20 + ph}" x2="{x0 + pw}" y2="{y0 + 20 + ph}" stroke="black"/>')
        for i, name in enumerate(names):
            rate = float(groups[name].get(panel, 0.0))
            bh = rate * ph
            bx = x0 + 20 + i * (bw + gap)
            by = y0 + 20 + ph - bh
            out.append(f'<rect x="{bx}" y="{by:.2f}" width="{bw}" height="{bh:.2f}" '
                       f'fill="{palette[i % len(palette)]}"/>')
            out.append(f'<text x="{bx + bw / 2}" y="{by - 3:.2f}" text-anchor="middle">{100 * rate:.1f}</text>')
            out.append(f'<text x="{bx + bw / 2}" y="{y0 + 34 + ph}" text-anchor="middle" '
                       f'font-size="9">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
