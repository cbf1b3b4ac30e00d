"""Single-crop pose estimation: table, RANSAC, refinement and optional depth correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from surfdist.correspondence import (DEFAULT_TABLE_BUDGET, QueryImage, build_query_image, build_table,
                                     log_denominator, maxpool3)
from surfdist.errors import SurfdistError
from surfdist.geometry.render import RenderedCrop, visible_coordinates
from surfdist.geometry.transform import Camera, Pose
from surfdist.pose.depth import depth_adjust
from surfdist.pose.ransac import PoseHypothesis, RansacConfig, ransac
from surfdist.pose.refine import refine


@dataclass
class PipelineConfig:
    downscale: int = 3
    iterations: int = 2000
    gamma: float = 1.5
    refine: bool = True
    depth: bool = False
    rng_seed: int = 0
    table_budget: int = DEFAULT_TABLE_BUDGET
    max_refine_iterations: int = 100

    def ransac_config(self, seed_offset: int = 0) -> RansacConfig:
        return RansacConfig(iterations=self.iterations, gamma=self.gamma,
                            rng_seed=self.rng_seed + seed_offset)


@dataclass(eq=False)
class Estimate:
    pose: Pose | None
    score: float = float("nan")
    mask_score: float = float("nan")
    corr_score: float = float("nan")
    refine_iterations: int = 0
    hypothesis: PoseHypothesis | None = None
    error: str = ""
    refine_trace: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.pose is None


class LearnedQueries:
    """Adapter: queries from a trained query model applied to the crop's features."""

    def __init__(self, models):
        self.models = models

    def keys(self, coords):
        return self.models.keys(coords)

    def query_image(self, crop: RenderedCrop, downscale_factor: int = 1) -> QueryImage:
        return build_query_image(self.models, crop.feature_image, downscale_factor)


def as_query_source(models):
    """Wrap trained models; objects that already build query images pass through."""
    return models if hasattr(models, "query_image") else LearnedQueries(models)


def estimate_pose(crop: RenderedCrop, models, surface, camera: Camera, cfg: PipelineConfig | None = None,
                  seed_offset: int = 0) -> Estimate:
    """Estimate the object pose in ``crop``. Failures come back as an :class:`Estimate` with ``error`` set."""
    cfg = cfg or PipelineConfig()
    src = as_query_source(models)
    try:
        keys = src.keys(surface.points)
        q_small = src.query_image(crop, cfg.downscale)
        table = build_table(q_small, keys, surface, cfg.table_budget)
        small_cam = camera.downscaled(cfg.downscale)
        result = ransac(table, q_small.mask_prob, small_cam, surface, cfg.ransac_config(seed_offset),
                        pooled=maxpool3(table))
        best = result.best
        pose = best.pose
        est = Estimate(pose, best.score, best.mask_score, best.corr_score, 0, best)
        q_full = None
        if cfg.refine:
            q_full = src.query_image(crop, 1)
            log_den = log_denominator(q_full.queries, keys)
            _, coords, _, _ = visible_coordinates(pose, camera, surface, warn=False)
            res = refine(pose, q_full, log_den, src, coords, camera,
                         max_iterations=cfg.max_refine_iterations)
            est.pose = res.pose
            est.refine_iterations = res.iterations
            est.refine_trace = res.trace
        if cfg.depth:
            q_full = q_full or src.query_image(crop, 1)
            est.pose = depth_adjust(est.pose, q_full, crop.depth_image, camera, surface)
        return est
    except SurfdistError as exc:
        return Estimate(None, error=f"{type(exc).__name__}: {exc}")


def recall(distances, diameter: float, thresholds=(0.02, 0.05, 0.10)) -> dict:
    """Fraction of finite distances under each threshold (as a fraction of the diameter)."""
    d = np.asarray(distances, dtype=np.float64)
    if len(d) == 0:
        return {th: 0.0 for th in thresholds}
    ok = np.isfinite(d)
    return {th: float(np.mean(ok & (np.where(ok, d, np.inf) < th * diameter))) for th in thresholds}
