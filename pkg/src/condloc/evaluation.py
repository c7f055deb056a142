"""Pose-error metrics, threshold accuracies, cumulative curves and reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ArtifactError, DomainError
from .geometry import CameraPose

DEFAULT_BINS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
QUAT_TOL = 1e-6


@dataclass(frozen=True)
class PoseError:
    translation_m: float
    rotation_deg: float

    def __post_init__(self):
        if self.translation_m < 0 or not 0 <= self.rotation_deg <= 180:
            raise DomainError(f"invalid pose error {self}")


@dataclass
class EvalConfig:
    bins: list = field(default_factory=lambda: [list(b) for b in DEFAULT_BINS])


def pose_error(estimated: CameraPose, ground_truth: CameraPose) -> PoseError:
    qa = np.asarray(estimated.rotation, dtype=np.float64)
    qb = np.asarray(ground_truth.rotation, dtype=np.float64)
    for q in (qa, qb):
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise DomainError(f"quaternion {q} is not unit norm")
    t = float(np.linalg.norm(estimated.center - ground_truth.center))
    r = math.degrees(2.0 * math.acos(min(1.0, abs(float(qa @ qb)))))
    return PoseError(t, r)


def threshold_accuracy(errors: Sequence[PoseError], bins=DEFAULT_BINS) -> list[float]:
    """Percentage of errors with translation <= t AND rotation <= r, per bin."""
    if not errors:
        raise DomainError("threshold accuracy of an empty error list")
    t = np.array([e.translation_m for e in errors])
    r = np.array([e.rotation_deg for e in errors])
    return [100.0 * float(np.mean((t <= bt) & (r <= br))) for bt, br in bins]


def cumulative_error_curve(errors: Sequence[PoseError], axis: str = "translation") -> list[tuple[float, float]]:
    """Empirical CDF as (threshold, fraction <= threshold) at each distinct error."""
    if not errors:
        raise DomainError("cumulative curve of an empty error list")
    if axis not in ("translation", "rotation"):
        raise DomainError(f"unknown axis {axis!r}")
    vals = np.sort([e.translation_m if axis == "translation" else e.rotation_deg for e in errors])
    uniq = np.unique(vals)
    counts = np.searchsorted(vals, uniq, side="right")
    return [(float(u), float(c) / len(vals)) for u, c in zip(uniq, counts)]


def curve_quantile(curve, q: float) -> float:
    """Smallest threshold whose cumulative fraction reaches q."""
    for thr, frac in curve:
        if frac >= q - 1e-12:
            return thr
    return curve[-1][0]


def random_pose_accuracy(query_poses, reference_poses, bins=DEFAULT_BINS) -> list[float]:
    """Expected accuracy when each query takes a uniformly random reference pose."""
    hits = np.zeros(len(bins))
    for q in query_poses:
        errs = [pose_error(r, q) for r in reference_poses]
        hits += np.array(threshold_accuracy(errs, bins)) / 100.0
    return list(100.0 * hits / len(query_poses))


@dataclass
class EvalReport:
    run_id: str
    bins: list
    accuracies: dict  # condition -> list of percentages, one per bin
    curves: dict  # (condition, axis) -> curve
    metadata: dict = field(default_factory=dict)

    def check(self):
        for cond, accs in self.accuracies.items():
            if any(not 0 <= a <= 100 for a in accs):
                raise DomainError(f"{cond}: accuracy outside [0, 100]")
        return self


def evaluate_errors(
    run_id: str, errors_by_condition: dict, bins=DEFAULT_BINS, metadata=None, pooled_row: bool = False
) -> EvalReport:
    """Build a report; with ``pooled_row`` an extra ``all`` row pools every condition."""
    bins = [tuple(b) for b in bins]
    pooled = [e for errs in errors_by_condition.values() for e in errs]
    groups = dict(sorted(errors_by_condition.items()))
    if pooled_row and len(groups) > 1:
        groups["all"] = pooled
    acc = {c: threshold_accuracy(e, bins) for c, e in groups.items()}
    curves = {(c, axis): cumulative_error_curve(e, axis) for c, e in groups.items() for axis in ("translation", "rotation")}
    return EvalReport(run_id, [list(b) for b in bins], acc, curves, dict(metadata or {})).check()


def _fmt(x: float) -> str:
    return f"{x:.6f}".rstrip("0").rstrip(".") if x != int(x) else f"{int(x)}"


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "condition", "bin_t", "bin_r", "accuracy_pct"])
    for rep in reports:
        for cond, accs in rep.accuracies.items():
            for (bt, br), a in zip(rep.bins, accs):
                w.writerow([rep.run_id, cond, _fmt(bt), _fmt(br), f"{a:.4f}"])
    return buf.getvalue()


def curve_svg(curves: dict, title: str, xlabel: str, width: int = 480, height: int = 320) -> str:
    """Step plot of one or more cumulative curves, hand-written for byte-stable output."""
    pad = 48
    xmax = max((c[-1][0] for c in curves.values() if c), default=1.0) or 1.0
    sx = lambda x: pad + (width - 2 * pad) * x / xmax
    sy = lambda y: height - pad - (height - 2 * pad) * y
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{sy(0):.2f}" x2="{width - pad}" y2="{sy(0):.2f}" stroke="black"/>',
        f'<line x1="{pad}" y1="{sy(0):.2f}" x2="{pad}" y2="{sy(1):.2f}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="12" y="{pad - 12}" font-size="12">fraction of queries</text>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">0</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">{xmax:.3g}</text>',
    ]
    for i, (label, curve) in enumerate(sorted(curves.items())):
        pts = [(0.0, 0.0)]
        prev = 0.0
        for x, y in curve:
            pts += [(x, prev), (x, y)]
            prev = y
        pts.append((xmax, prev))
        d = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        color = palette[i % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{d}"/>')
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 * i}" font-size="11" fill="{color}" text-anchor="end">{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(reports: Sequence[EvalReport], out_dir) -> list[Path]:
    """Write ``accuracy.csv`` plus one SVG per (run, axis) with a line per condition."""
    if not reports:
        raise DomainError("no reports to emit")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / "accuracy.csv"]
        with open(written[0], "w", newline="\n") as fh:
            fh.write(report_csv(reports))
        for rep in reports:
            for axis, unit in (("translation", "translation error (world units)"), ("rotation", "rotation error (deg)")):
                curves = {c: curve for (c, a), curve in rep.curves.items() if a == axis}
                path = out_dir / f"{rep.run_id}_{axis}_cdf.svg"
                with open(path, "w", newline="\n") as fh:
                    fh.write(curve_svg(curves, f"{rep.run_id} {axis}", unit))
                written.append(path)
    except OSError as exc:
        raise ArtifactError(f"cannot write report to {out_dir}: {exc}") from exc
    return written
