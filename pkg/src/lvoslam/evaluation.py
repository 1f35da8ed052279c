"""KITTI odometry metric: relative errors over all sub-sequences of fixed length."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import se3_inverse

DEFAULT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


@dataclass
class ErrorReport:
    """Per-segment records plus their aggregates.

    Translational errors are in percent of the segment length, rotational
    errors in degrees per metre.
    """

    # columns: first frame, last frame, length, speed (m/s), t_err (%), r_err (deg/m)
    records: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    speed_bin_width: float = 2.0

    @property
    def t_rel(self) -> float:
        return float(self.records[:, 4].mean()) if len(self.records) else float("nan")

    @property
    def r_rel(self) -> float:
        return float(self.records[:, 5].mean()) if len(self.records) else float("nan")

    @property
    def r_rel_per_100m(self) -> float:
        return 100.0 * self.r_rel

    def by_length(self) -> list[tuple[float, float, float, int]]:
        """``(length, t_err %, r_err deg/m, count)`` for every length with segments."""
        out = []
        for length in np.unique(self.records[:, 2]):
            sel = self.records[self.records[:, 2] == length]
            out.append((float(length), float(sel[:, 4].mean()), float(sel[:, 5].mean()), len(sel)))
        return out

    def by_speed(self) -> list[tuple[float, float, float, int]]:
        """Same as :meth:`by_length` but binned on speed; the key is the bin's lower edge in m/s."""
        if not len(self.records):
            return []
        bins = np.floor(self.records[:, 3] / self.speed_bin_width)
        out = []
        for b in np.unique(bins):
            sel = self.records[bins == b]
            out.append((float(b * self.speed_bin_width), float(sel[:, 4].mean()),
                        float(sel[:, 5].mean()), len(sel)))
        return out


def path_distances(traj: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(traj[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Rotation angle in radians, from the trace (cosine) and the skew part (sine)."""
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    s = 0.5 * np.sqrt(
        (R[..., 2, 1] - R[..., 1, 2]) ** 2 + (R[..., 0, 2] - R[..., 2, 0]) ** 2
        + (R[..., 1, 0] - R[..., 0, 1]) ** 2
    )
    return np.arctan2(s, c)


def kitti_errors(gt: np.ndarray, pred: np.ndarray, lengths=DEFAULT_LENGTHS,
                 frame_period: float = 0.1, speed_bin_width: float = 2.0) -> ErrorReport:
    """Evaluate ``pred`` against ``gt`` on every (start frame, length) segment.

    A segment ends at the first frame whose ground-truth path distance from
    the start is at least ``length``; segments that run off the end are skipped.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"trajectory lengths differ: {len(gt)} vs {len(pred)}")
    if len(gt) < 2:
        raise ValueError("need at least 2 poses")
    dist = path_distances(gt)
    starts = np.arange(len(gt))
    rows = []
    for length in lengths:
        ends = np.searchsorted(dist, dist + length, side="left")
        ok = ends < len(gt)
        s, e = starts[ok], ends[ok]
        if not len(s):
            continue
        rel_gt = se3_inverse(gt[s]) @ gt[e]
        rel_pred = se3_inverse(pred[s]) @ pred[e]
        # inverse(rel_gt) @ rel_pred, with the translation written as a difference
        # so identical relative poses give exactly zero
        r_gt_t = np.swapaxes(rel_gt[:, :3, :3], 1, 2)
        err_t = np.einsum("nij,nj->ni", r_gt_t, rel_pred[:, :3, 3] - rel_gt[:, :3, 3])
        err_r = r_gt_t @ rel_pred[:, :3, :3]
        t_err = np.linalg.norm(err_t, axis=1) / length * 100.0
        r_err = np.degrees(rotation_angle(err_r)) / length
        speed = (dist[e] - dist[s]) / ((e - s) * frame_period)
        rows.append(np.column_stack([s, e, np.full(len(s), float(length)), speed, t_err, r_err]))
    records = np.concatenate(rows) if rows else np.zeros((0, 6))
    # deterministic order: by start frame, then length
    if len(records):
        records = records[np.lexsort((records[:, 2], records[:, 0]))]
    return ErrorReport(records, speed_bin_width)


REPORT_FILES = {
    "trans_vs_length": "trans_vs_length.csv",
    "rot_vs_length": "rot_vs_length.csv",
    "trans_vs_speed": "trans_vs_speed.csv",
    "rot_vs_speed": "rot_vs_speed.csv",
    "summary": "summary.csv",
}


def _num(x: float) -> str:
    return format(x, ".17g")


def report_csv(report: ErrorReport, out_dir) -> dict[str, str]:
    """Write plot-ready tables and a one-row summary; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in REPORT_FILES.items()}
    tables = {
        "trans_vs_length": (("length_m", "t_err_pct"), [(b, t) for b, t, _, _ in report.by_length()]),
        "rot_vs_length": (("length_m", "r_err_deg_per_m"), [(b, r) for b, _, r, _ in report.by_length()]),
        "trans_vs_speed": (("speed_m_s", "t_err_pct"), [(b, t) for b, t, _, _ in report.by_speed()]),
        "rot_vs_speed": (("speed_m_s", "r_err_deg_per_m"), [(b, r) for b, _, r, _ in report.by_speed()]),
    }
    for key, (header, rows) in tables.items():
        with open(paths[key], "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(header)
            wr.writerows([_num(a), _num(b)] for a, b in rows)
    with open(paths["summary"], "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("segments", "t_rel_pct", "r_rel_deg_per_m", "r_rel_deg_per_100m"))
        if len(report.records):
            wr.writerow((len(report.records), f"{report.t_rel:.2f}", f"{report.r_rel:.4f}",
                         f"{report.r_rel_per_100m:.2f}"))
    return paths


def read_report_table(path) -> list[tuple[float, float]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return [(float(a), float(b)) for a, b in rows[1:]]


def format_summary(report: ErrorReport) -> str:
    if not len(report.records):
        return "no segments long enough to evaluate"
    return (f"t_rel {report.t_rel:.2f} %  r_rel {report.r_rel:.4f} deg/m "
            f"({report.r_rel_per_100m:.2f} deg/100m) over {len(report.records)} segments")

