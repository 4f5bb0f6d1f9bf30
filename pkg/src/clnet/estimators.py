"""Weighted model estimation, full-size verification and classical baselines."""

from __future__ import annotations

import numpy as np

from .geometry import (
    DegenerateModelError,
    EssentialMatrix,
    LineModel,
    canonicalize_line,
    enforce_essential,
    point_line_distance,
    symmetric_epipolar_distance,
)

__all__ = [
    "weighted_line_fit",
    "least_squares_line",
    "weighted_eight_point",
    "epipolar_design_matrix",
    "full_size_verification",
    "ransac_line_baseline",
    "evaluate_line",
]


def _check_weights(weights, m: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (m,):
        raise ValueError(f"expected {m} weights, got {w.shape[0]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise DegenerateModelError("all weights are zero")
    return w


def weighted_line_fit(points, weights) -> LineModel:
    """Minimize ``sum w_i (a x_i + b y_i + c)^2`` subject to ``a^2 + b^2 + c^2 = 1``.

    The solution is the eigenvector of the smallest eigenvalue of the 3x3
    weighted scatter of homogeneous points. Zero-weight points are dropped
    before forming the scatter.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be M x 2, got {pts.shape}")
    if len(pts) < 2:
        raise DegenerateModelError("need at least two points")
    w = _check_weights(weights, len(pts))
    keep = w > 0
    h = np.column_stack([pts[keep], np.ones(int(keep.sum()))])
    scatter = (h * w[keep, None]).T @ h
    lam, vecs = np.linalg.eigh(scatter)
    if lam[1] <= 1e-12 * max(lam[2], 1e-300):
        raise DegenerateModelError("weighted points do not determine a line")
    return LineModel.from_array(vecs[:, 0])


def least_squares_line(points) -> LineModel:
    """Unweighted homogeneous least squares over every point."""
    return weighted_line_fit(points, np.ones(len(points)))


def epipolar_design_matrix(correspondences) -> np.ndarray:
    """Rows ``kron(x', x)`` so that ``X @ vec(E) = x'^T E x`` with row-major ``vec``."""
    c = np.asarray(correspondences, dtype=np.float64)
    ones = np.ones(len(c))
    x1 = np.column_stack([c[:, 0], c[:, 1], ones])
    x2 = np.column_stack([c[:, 2], c[:, 3], ones])
    return (x2[:, :, None] * x1[:, None, :]).reshape(len(c), 9)


def weighted_eight_point(correspondences, weights) -> EssentialMatrix:
    """Weighted linear essential-matrix estimate from normalized correspondences.

    Rows of the design matrix are scaled by ``sqrt(w)``; the null vector is
    the last right singular vector, then singular values are forced to
    ``(1, 1, 0)``.
    """
    c = np.asarray(correspondences, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 4:
        raise ValueError(f"correspondences must be M x 4, got {c.shape}")
    if len(c) < 8:
        raise DegenerateModelError("need at least eight correspondences")
    w = _check_weights(weights, len(c))
    keep = w > 0
    if keep.sum() < 8:
        raise DegenerateModelError("fewer than eight correspondences with positive weight")
    A = epipolar_design_matrix(c[keep]) * np.sqrt(w[keep])[:, None]
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateModelError("design matrix has rank below eight")
    return EssentialMatrix(enforce_essential(Vt[-1].reshape(3, 3)))


def full_size_verification(model, items, d_thr: float) -> tuple[np.ndarray, int]:
    """Label every original item as inlier when its residual to ``model`` is below ``d_thr``."""
    items = np.asarray(items, dtype=np.float64)
    if isinstance(model, LineModel):
        d = point_line_distance(model, items)
    elif isinstance(model, EssentialMatrix):
        if not np.any(model.matrix):
            raise DegenerateModelError("essential matrix is zero")
        d = symmetric_epipolar_distance(model, items)
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    mask = d < d_thr
    return mask, int(mask.sum())


def ransac_line_baseline(points, iterations: int = 1000, inlier_thr: float = 0.05, seed: int = 0) -> LineModel:
    """Seeded two-point RANSAC followed by a least-squares refit on the best consensus set.

    Hypotheses are ranked by inlier count, then by lower mean inlier residual.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise DegenerateModelError("need at least two points")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, n, size=iterations)
    second = (first + rng.integers(1, n, size=iterations)) % n
    p, q = pts[first], pts[second]
    lines = np.column_stack([p[:, 1] - q[:, 1], q[:, 0] - p[:, 0], p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]])
    norm = np.hypot(lines[:, 0], lines[:, 1])
    valid = norm > 0
    lines, norm = lines[valid], norm[valid]
    if len(lines) == 0:
        raise DegenerateModelError("every sampled pair was coincident")

    best_count, best_resid, best_mask = -1, np.inf, None
    # chunk to bound memory at N x chunk
    for start in range(0, len(lines), 256):
        L, nn = lines[start : start + 256], norm[start : start + 256]
        d = np.abs(pts @ L[:, :2].T + L[:, 2]) / nn
        inl = d < inlier_thr
        counts = inl.sum(axis=0)
        mean_res = np.where(counts > 0, (d * inl).sum(axis=0) / np.maximum(counts, 1), np.inf)
        j = np.lexsort((mean_res, -counts))[0]
        if counts[j] > best_count or (counts[j] == best_count and mean_res[j] < best_resid):
            best_count, best_resid, best_mask = int(counts[j]), float(mean_res[j]), inl[:, j]
    if best_count < 2:
        raise DegenerateModelError("no hypothesis has at least two inliers")
    return least_squares_line(pts[best_mask])


def evaluate_line(est, gt) -> float:
    """Euclidean distance between canonicalized ``(a, b, c)`` triples."""
    a = canonicalize_line(est.as_array() if isinstance(est, LineModel) else est)
    b = canonicalize_line(gt.as_array() if isinstance(gt, LineModel) else gt)
    return float(np.linalg.norm(a - b))
