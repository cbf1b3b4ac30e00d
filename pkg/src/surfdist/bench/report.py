"""Per-scene evaluation rows, recall aggregation and deterministic CSV writing."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from surfdist.pipeline import Estimate
from surfdist.synthetic import symmetry_aware_distance, symmetry_aware_rotation_error

POSE_HEADER = (["scene_id", "object_id"] + [f"r{i}{j}" for i in range(1, 4) for j in range(1, 4)]
               + ["t1", "t2", "t3", "score", "s_M", "s_C", "refine_iterations"])
EVAL_HEADER = ["scene_id", "object_id", "failed", "distance", "distance_rel", "rotation_error_deg",
               "translation_error", "score", "error"]


def fmt(value) -> str:
    """Shortest round-trip text for floats; fixed text for non-finite values."""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return repr(v) if np.isfinite(v) else ("nan" if np.isnan(v) else ("inf" if v > 0 else "-inf"))
    return str(value)


@dataclass
class SceneResult:
    scene_id: int
    object_id: str
    estimate: Estimate
    distance: float = float("inf")
    rotation_error: float = float("nan")
    translation_error: float = float("nan")
    runtime_s: float = 0.0

    @property
    def failed(self) -> bool:
        return self.estimate.failed


def evaluate_estimate(scene_id, object_id, est: Estimate, gt_pose, obj, runtime_s=0.0) -> SceneResult:
    """Symmetry-aware errors of one estimate; failures keep infinite distance."""
    res = SceneResult(scene_id, object_id, est, runtime_s=runtime_s)
    if not est.failed:
        res.distance = symmetry_aware_distance(gt_pose, est.pose, obj.surface.points, obj.symmetry)
        res.rotation_error = symmetry_aware_rotation_error(gt_pose.rotation, est.pose.rotation, obj.symmetry)
        res.translation_error = float(np.linalg.norm(gt_pose.translation - est.pose.translation))
    return res


@dataclass
class EvalReport:
    """Rows for every test scene plus recall at each threshold (fraction of the diameter)."""

    rows: list
    diameters: dict
    thresholds: tuple = (0.02, 0.05, 0.10)
    recall: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.recall:
            self.recall = {obj: self.recall_for(obj) for obj in sorted(self.diameters)}

    def recall_for(self, object_id) -> dict:
        d = np.array([r.distance for r in self.rows if r.object_id == object_id])
        diam = self.diameters[object_id]
        if len(d) == 0:
            return {th: 0.0 for th in self.thresholds}
        return {th: float(np.mean(d < th * diam)) for th in self.thresholds}

    def mean_translation_error(self, object_id=None) -> float:
        e = [r.translation_error for r in self.rows if object_id in (None, r.object_id) and not r.failed]
        return float(np.mean(e)) if e else float("nan")


def _csv_text(header, rows, config_hash=None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, config_hash=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_csv_text(header, rows, config_hash))


def pose_rows(results) -> list:
    rows = []
    for r in results:
        e = r.estimate
        if e.failed:
            vals = [float("nan")] * 12
        else:
            vals = list(e.pose.rotation.reshape(-1)) + list(e.pose.translation)
        rows.append([r.scene_id, r.object_id, *vals, e.score, e.mask_score, e.corr_score, e.refine_iterations])
    return rows


def eval_rows(report: EvalReport) -> list:
    rows = []
    for r in report.rows:
        diam = report.diameters[r.object_id]
        rows.append([r.scene_id, r.object_id, int(r.failed), r.distance, r.distance / diam,
                     float(np.degrees(r.rotation_error)), r.translation_error, r.estimate.score,
                     r.estimate.error])
    return rows


def recall_rows(report: EvalReport) -> tuple:
    header = ["object_id", "scenes"] + [f"recall@{th:g}" for th in report.thresholds]
    rows = []
    for obj in sorted(report.recall):
        n = sum(1 for r in report.rows if r.object_id == obj)
        rows.append([obj, n] + [report.recall[obj][th] for th in report.thresholds])
    return header, rows
