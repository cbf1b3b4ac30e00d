"""Pose estimation: minimal solver, hypothesis scoring, RANSAC, refinement, depth correction."""
from surfdist.pose.ap3p import ap3p, quartic_roots, solve_bearings, solve_bearings_batch
from surfdist.pose.depth import depth_adjust
from surfdist.pose.ransac import PoseHypothesis, RansacConfig, RansacResult, ransac
from surfdist.pose.refine import RefineObjective, RefineResult, refine
from surfdist.pose.scoring import (combined_score, corr_score, corr_scores, mask_score, mask_scores,
                                   score_poses, visibility_check)

__all__ = [
    "PoseHypothesis", "RansacConfig", "RansacResult", "RefineObjective", "RefineResult",
    "ap3p", "combined_score", "corr_score", "corr_scores", "depth_adjust", "mask_score",
    "mask_scores", "quartic_roots", "ransac", "refine", "score_poses", "solve_bearings",
    "solve_bearings_batch", "visibility_check",
]
