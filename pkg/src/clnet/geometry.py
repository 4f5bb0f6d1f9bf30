"""Parametric models, epipolar machinery and error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "GeometryError",
    "DegenerateModelError",
    "LineModel",
    "EssentialMatrix",
    "Pose",
    "MatchSet",
    "ParametricModel",
    "canonicalize_line",
    "skew",
    "essential_from_pose",
    "enforce_essential",
    "normalize_keypoints",
    "denormalize_keypoints",
    "symmetric_epipolar_distance",
    "label_by_threshold",
    "point_line_distance",
    "triangulate",
    "pose_from_essential",
    "rotation_angle_deg",
    "pose_error_deg",
    "auc_at_thresholds",
]


class GeometryError(ValueError):
    pass


class DegenerateModelError(GeometryError):
    """A model cannot be estimated or used from the given configuration."""


def canonicalize_line(abc) -> np.ndarray:
    """Scale to unit norm and make the first nonzero coefficient positive."""
    v = np.asarray(abc, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateModelError("line coefficients are all zero")
    # already-unit input is left untouched so canonicalization is idempotent
    if abs(n - 1.0) > 4 * np.finfo(float).eps:
        v = v / n
    nz = np.flatnonzero(v)
    if v[nz[0]] < 0:
        v = -v
    return v


@dataclass(frozen=True)
class LineModel:
    """Line ``a x + b y + c = 0``; stored canonicalized."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        a, b, c = canonicalize_line((self.a, self.b, self.c))
        object.__setattr__(self, "a", float(a))
        object.__setattr__(self, "b", float(b))
        object.__setattr__(self, "c", float(c))

    @classmethod
    def from_array(cls, abc) -> "LineModel":
        a, b, c = np.asarray(abc, dtype=np.float64).reshape(3)
        return cls(a, b, c)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


@dataclass(frozen=True, eq=False)
class EssentialMatrix:
    """Rank-2 essential matrix with unit Frobenius norm."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"essential matrix must be 3x3, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    def __eq__(self, other) -> bool:
        return isinstance(other, EssentialMatrix) and np.array_equal(self.matrix, other.matrix)


ParametricModel = Union[LineModel, EssentialMatrix]


@dataclass(frozen=True, eq=False)
class Pose:
    """Relative pose mapping first-camera points to the second: ``X2 = R X1 + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(t)
        if n == 0:
            raise GeometryError("translation must be nonzero")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t / n)


@dataclass
class MatchSet:
    """N input items (points or correspondences) with optional ground truth."""

    items: np.ndarray
    labels: np.ndarray | None = None
    gt_model: ParametricModel | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.float64)
        if self.items.ndim != 2 or self.items.shape[0] < 1 or self.items.shape[1] not in (2, 4):
            raise GeometryError(f"items must be N x 2 or N x 4 with N >= 1, got {self.items.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != (len(self.items),):
                raise GeometryError("labels length must equal the item count")

    @property
    def task(self) -> str:
        return "line" if self.items.shape[1] == 2 else "twoview"

    def __len__(self) -> int:
        return len(self.items)


# --- essential matrices -----------------------------------------------------


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(R, t) -> np.ndarray:
    """``[t]x R``, Frobenius-normalized."""
    E = skew(t) @ np.asarray(R, dtype=np.float64)
    return E / np.linalg.norm(E)


def enforce_essential(m) -> np.ndarray:
    """Project onto singular values (1, 1, 0) and normalize to unit Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(m, dtype=np.float64).reshape(3, 3))
    return (U @ np.diag([1.0, 1.0, 0.0]) @ Vt) / np.sqrt(2.0)


def normalize_keypoints(correspondences, K1, K2) -> np.ndarray:
    """Map pixel correspondences ``[x, y, x', y']`` to normalized camera coordinates."""
    return _apply_intrinsics(correspondences, K1, K2, inverse=True)


def denormalize_keypoints(correspondences, K1, K2) -> np.ndarray:
    return _apply_intrinsics(correspondences, K1, K2, inverse=False)


def _apply_intrinsics(corr, K1, K2, inverse: bool) -> np.ndarray:
    corr = np.asarray(corr, dtype=np.float64)
    out = np.empty_like(corr)
    for col, K in ((0, K1), (2, K2)):
        K = np.asarray(K, dtype=np.float64)
        if K.shape != (3, 3) or abs(np.linalg.det(K)) < 1e-12:
            raise GeometryError("intrinsics must be an invertible 3x3 matrix")
        M = np.linalg.inv(K) if inverse else K
        h = np.column_stack([corr[:, col : col + 2], np.ones(len(corr))]) @ M.T
        out[:, col : col + 2] = h[:, :2] / h[:, 2:3]
    return out


def _homogeneous(corr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ones = np.ones(len(corr))
    return np.column_stack([corr[:, 0], corr[:, 1], ones]), np.column_stack([corr[:, 2], corr[:, 3], ones])


def symmetric_epipolar_distance(E, corr):
    """Symmetric epipolar distance of one correspondence (shape 4) or many (N x 4).

    Degenerate correspondences, where both epipolar lines vanish, get ``inf``.
    """
    E = E.matrix if isinstance(E, EssentialMatrix) else np.asarray(E, dtype=np.float64)
    c = np.asarray(corr, dtype=np.float64)
    single = c.ndim == 1
    x1, x2 = _homogeneous(np.atleast_2d(c))
    Ex1 = x1 @ E.T
    Etx2 = x2 @ E
    r = np.sum(x2 * Ex1, axis=1)
    n1 = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2
    n2 = Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv1 = np.where(n1 > 0, 1.0 / np.where(n1 > 0, n1, 1.0), 0.0)
        inv2 = np.where(n2 > 0, 1.0 / np.where(n2 > 0, n2, 1.0), 0.0)
    d = r * r * (inv1 + inv2)
    d = np.where((n1 == 0) & (n2 == 0), np.inf, d)
    return float(d[0]) if single else d


def label_by_threshold(distances, d_thr: float) -> np.ndarray:
    if d_thr < 0:
        raise ValueError("d_thr must be nonnegative")
    return np.asarray(distances, dtype=np.float64) < d_thr


def point_line_distance(line, p):
    """Perpendicular distance from point(s) ``p`` (shape 2 or N x 2) to ``line``."""
    a, b, c = line.as_array() if isinstance(line, LineModel) else np.asarray(line, dtype=np.float64)
    norm = np.hypot(a, b)
    if norm == 0:
        raise DegenerateModelError("line has a = b = 0")
    p = np.asarray(p, dtype=np.float64)
    d = np.abs(a * p[..., 0] + b * p[..., 1] + c) / norm
    return float(d) if p.ndim == 1 else d


# --- pose recovery ----------------------------------------------------------


def triangulate(R, t, corr) -> np.ndarray:
    """Linear (DLT) triangulation with cameras ``[I|0]`` and ``[R|t]``; returns N x 3."""
    corr = np.atleast_2d(np.asarray(corr, dtype=np.float64))
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.stack(
        [
            corr[:, 0, None] * P1[2] - P1[0],
            corr[:, 1, None] * P1[2] - P1[1],
            corr[:, 2, None] * P2[2] - P2[0],
            corr[:, 3, None] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    w = X[:, 3:4]
    w = np.where(np.abs(w) < 1e-300, 1e-300, w)
    return X[:, :3] / w


def _pose_candidates(E: np.ndarray):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    u3 = U[:, 2]
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (u3, -u3):
            yield R, t


def pose_from_essential(E, correspondences) -> Pose:
    """Decompose ``E`` and keep the candidate with the most points in front of both cameras."""
    E = E.matrix if isinstance(E, EssentialMatrix) else np.asarray(E, dtype=np.float64)
    corr = np.atleast_2d(np.asarray(correspondences, dtype=np.float64))
    if len(corr) < 1:
        raise GeometryError("pose_from_essential needs at least one correspondence")
    best, best_count = None, 0
    for R, t in _pose_candidates(E):
        X1 = triangulate(R, t, corr)
        X2 = X1 @ R.T + t
        count = int(np.sum((X1[:, 2] > 0) & (X2[:, 2] > 0)))
        if count > best_count:
            best, best_count = (R, t), count
    if best is None:
        raise GeometryError("no pose candidate passes the cheirality check")
    return Pose(*best)


def _angle_between(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def rotation_angle_deg(R1, R2) -> float:
    D = np.asarray(R1).T @ np.asarray(R2)
    s = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    c = 0.5 * (np.trace(D) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def pose_error_deg(est: Pose, gt: Pose) -> float:
    """Max of rotation and sign-invariant translation angle errors, in degrees."""
    r_err = rotation_angle_deg(est.R, gt.R)
    t_err = np.degrees(min(_angle_between(est.t, gt.t), _angle_between(-est.t, gt.t)))
    return float(max(r_err, t_err))


def auc_at_thresholds(errors: Sequence[float], thresholds: Sequence[float] = (5, 10, 20)) -> list[float]:
    """Percent area under the empirical error CDF on ``[0, T]`` for each threshold.

    The CDF is a step function, so the integral is exact:
    ``mean(max(0, T - e)) / T``.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("auc_at_thresholds needs at least one error")
    if np.any(e < 0) or np.any(np.isnan(e)):
        raise ValueError("errors must be nonnegative")
    return [float(100.0 * np.mean(np.clip(T - e, 0.0, None)) / T) for T in thresholds]
