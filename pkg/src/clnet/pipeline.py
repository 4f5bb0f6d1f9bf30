"""Inference: network scores, weighted estimate on the candidates, full-size verification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .estimators import evaluate_line, full_size_verification, weighted_eight_point, weighted_line_fit
from .geometry import DegenerateModelError, EssentialMatrix, LineModel, Pose, pose_error_deg, pose_from_essential
from .network import NetConfig, clnet_forward

log = logging.getLogger(__name__)

LINE_D_THR = 0.05
TWO_VIEW_D_THR = 1e-4
# canonical unit triples are at most this far apart, so a missing model scores worst-case
MAX_LINE_ERROR = 2.0
MAX_POSE_ERROR = 180.0


def default_d_thr(task: str) -> float:
    return LINE_D_THR if task == "line" else TWO_VIEW_D_THR


@dataclass
class InferenceResult:
    model: LineModel | EssentialMatrix | None
    inlier_mask: np.ndarray
    inlier_count: int
    candidates: np.ndarray
    weights: np.ndarray
    fallback: str | None = None
    pose: Pose | None = None
    kept_chain: list = field(default_factory=list)  # original indices kept by each block


def estimate_from_weights(task: str, items, weights):
    if task == "line":
        return weighted_line_fit(items, weights)
    return weighted_eight_point(items, weights)


def infer(items, task: str, params, config: NetConfig, d_thr: float | None = None) -> InferenceResult:
    """Score, estimate on the pruned candidates with final weights, then relabel all N items.

    All-zero final weights fall back to uniform weights on the candidates. If
    that is still degenerate the result carries no model and no inliers.
    """
    items = np.asarray(items, dtype=np.float64)
    d_thr = default_d_thr(task) if d_thr is None else d_thr
    with ad.no_grad():
        out = clnet_forward(items, params, config)
    cand = out.candidates
    chain = [b.kept_original for b in out.blocks]
    w = out.w_final.data.copy()
    fallback = None
    if not np.any(w > 0):
        fallback = "uniform"
        w = np.ones_like(w)
    try:
        model = estimate_from_weights(task, items[cand], w)
    except DegenerateModelError as exc:
        log.info("degenerate estimate (%s)", exc)
        return InferenceResult(None, np.zeros(len(items), bool), 0, cand, out.w_final.data, "degenerate", None, chain)
    mask, count = full_size_verification(model, items, d_thr)
    pose = pose_from_essential(model, items[mask] if count else items) if task == "twoview" else None
    return InferenceResult(model, mask, count, cand, out.w_final.data, fallback, pose, chain)


def sample_error(sample, result: InferenceResult) -> float:
    """Line: L2 between canonical triples. Two-view: max of rotation and translation angle."""
    if sample.task == "line":
        return MAX_LINE_ERROR if result.model is None else evaluate_line(result.model, sample.gt)
    if result.pose is None:
        return MAX_POSE_ERROR
    return pose_error_deg(result.pose, Pose(sample.R, sample.t))
