"""Seeded synthetic datasets and their line-delimited on-disk format.

Every sample is a pure function of ``(seed, index)``: the generator stream
for sample ``i`` is seeded from ``SeedSequence([seed, i, task])``, so
generating one sample alone gives the same values as generating it inside
a larger batch.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .geometry import EssentialMatrix, LineModel, MatchSet, essential_from_pose, symmetric_epipolar_distance

log = logging.getLogger(__name__)

FORMAT_TAG = "clnet-dataset"
FORMAT_VERSION = 1

LINE_POINTS = 1000
COORD_RANGE = 5.0
# nominal focal length used to express two-view noise in pixels
NOMINAL_FOCAL_PX = 500.0
OUTLIER_MIN_DISTANCE = 1e-4

_TASK_CODE = {"line": 0, "twoview": 1}


class DatasetFormatError(ValueError):
    pass


@dataclass(eq=False)
class LineSample:
    points: np.ndarray
    labels: np.ndarray
    gt: LineModel
    outlier_ratio: float
    seed: int = 0
    index: int = 0

    task = "line"

    @property
    def items(self) -> np.ndarray:
        return self.points

    @property
    def gt_model(self) -> LineModel:
        return self.gt

    def to_matchset(self) -> MatchSet:
        return MatchSet(self.points, self.labels, self.gt, {"seed": self.seed, "index": self.index})


@dataclass(eq=False)
class TwoViewSample:
    correspondences: np.ndarray
    labels: np.ndarray
    E: np.ndarray
    R: np.ndarray
    t: np.ndarray
    outlier_ratio: float
    noise_px: float = 0.0
    seed: int = 0
    index: int = 0

    task = "twoview"

    @property
    def items(self) -> np.ndarray:
        return self.correspondences

    @property
    def gt_model(self) -> EssentialMatrix:
        return EssentialMatrix(self.E)

    def to_matchset(self) -> MatchSet:
        return MatchSet(self.correspondences, self.labels, self.gt_model, {"seed": self.seed, "index": self.index})


Sample = Union[LineSample, TwoViewSample]


def _rng(seed: int, index: int, task: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), _TASK_CODE[task]]))


def _inlier_count(n: int, outlier_ratio: float) -> int:
    # round half up, not Python's banker's rounding
    return int(np.floor(n * (1.0 - outlier_ratio) + 0.5))


def _check_ratio(outlier_ratio: float) -> None:
    if not 0.0 <= outlier_ratio < 1.0:
        raise ValueError(f"outlier_ratio must lie in [0, 1), got {outlier_ratio}")


def gen_line_sample(seed: int, index: int, outlier_ratio: float, n_points: int = LINE_POINTS) -> LineSample:
    _check_ratio(outlier_ratio)
    rng = _rng(seed, index, "line")
    abc = rng.uniform(0.0, 1.0, size=3)
    # b = 0 would leave y undefined for inliers; covers a = b = 0 too
    while abc[1] == 0.0:
        log.info("resampling degenerate line for sample %d", index)
        abc = rng.uniform(0.0, 1.0, size=3)
    a, b, c = abc
    n_in = _inlier_count(n_points, outlier_ratio)
    x = rng.uniform(-COORD_RANGE, COORD_RANGE, size=n_in)
    inliers = np.column_stack([x, -(a * x + c) / b])
    outliers = rng.uniform(-COORD_RANGE, COORD_RANGE, size=(n_points - n_in, 2))
    points = np.vstack([inliers, outliers])
    labels = np.arange(n_points) < n_in
    perm = rng.permutation(n_points)
    return LineSample(points[perm], labels[perm], LineModel(a, b, c), float(outlier_ratio), int(seed), int(index))


def gen_line_dataset(count: int, outlier_ratio: float, seed: int, n_points: int = LINE_POINTS) -> list[LineSample]:
    """Line-fitting samples: ``(a, b, c)`` uniform in ``[0, 1]^3``, inlier ``x`` and
    outlier ``(x, y)`` uniform in ``[-5, 5]``."""
    _check_ratio(outlier_ratio)
    if count < 1:
        raise ValueError("count must be at least 1")
    return [gen_line_sample(seed, i, outlier_ratio, n_points) for i in range(count)]


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_deg))
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _frustum_points(rng: np.random.Generator, n: int) -> np.ndarray:
    z = rng.uniform(2.0, 6.0, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    return np.column_stack([uv * z[:, None], z])


def gen_two_view_sample(
    seed: int,
    index: int,
    n_points: int,
    outlier_ratio: float,
    noise_px: float = 0.0,
    max_rotation_deg: float = 30.0,
) -> TwoViewSample:
    _check_ratio(outlier_ratio)
    if n_points < 20:
        raise ValueError("n_points must be at least 20")
    rng = _rng(seed, index, "twoview")
    R = _random_rotation(rng, max_rotation_deg)
    for _ in range(100):
        t = rng.normal(size=3)
        norm = np.linalg.norm(t)
        if norm > 1e-6:
            t = t / norm
            break
    else:
        raise RuntimeError("could not sample a non-degenerate translation")
    E = essential_from_pose(R, t)

    X1 = _frustum_points(rng, n_points)
    X2 = X1 @ R.T + t
    # both cameras must see every point in front of them
    bad = X2[:, 2] <= 0.1
    while bad.any():
        X1[bad] = _frustum_points(rng, int(bad.sum()))
        X2 = X1 @ R.T + t
        bad = X2[:, 2] <= 0.1
    corr = np.column_stack([X1[:, :2] / X1[:, 2:], X2[:, :2] / X2[:, 2:]])

    n_in = _inlier_count(n_points, outlier_ratio)
    if noise_px > 0:
        corr[:n_in] += rng.normal(scale=noise_px / NOMINAL_FOCAL_PX, size=(n_in, 4))
    for i in range(n_in, n_points):
        # resample until the outlier is clear of the epipolar threshold
        while True:
            corr[i, 2:] = rng.uniform(-1.0, 1.0, size=2)
            if symmetric_epipolar_distance(E, corr[i]) >= OUTLIER_MIN_DISTANCE:
                break
    labels = np.arange(n_points) < n_in
    perm = rng.permutation(n_points)
    return TwoViewSample(
        corr[perm], labels[perm], E, R, t, float(outlier_ratio), float(noise_px), int(seed), int(index)
    )


def gen_two_view_dataset(
    count: int, n_points: int, outlier_ratio: float, noise_px: float, seed: int
) -> list[TwoViewSample]:
    _check_ratio(outlier_ratio)
    if count < 1:
        raise ValueError("count must be at least 1")
    return [gen_two_view_sample(seed, i, n_points, outlier_ratio, noise_px) for i in range(count)]


# --- on-disk format -----------------------------------------------------------


def _sample_to_dict(s: Sample) -> dict:
    base = {"task": s.task, "seed": s.seed, "index": s.index, "outlier_ratio": s.outlier_ratio}
    if isinstance(s, LineSample):
        base["points"] = s.points.tolist()
        base["labels"] = s.labels.tolist()
        base["model"] = {"a": s.gt.a, "b": s.gt.b, "c": s.gt.c}
    else:
        base["noise_px"] = s.noise_px
        base["correspondences"] = s.correspondences.tolist()
        base["labels"] = s.labels.tolist()
        base["model"] = {"E": s.E.tolist(), "R": s.R.tolist(), "t": s.t.tolist()}
    return base


def _sample_from_dict(d: dict) -> Sample:
    task = d["task"]
    labels = np.asarray(d["labels"], dtype=bool)
    if task == "line":
        m = d["model"]
        return LineSample(
            np.asarray(d["points"], dtype=np.float64).reshape(-1, 2),
            labels,
            LineModel(m["a"], m["b"], m["c"]),
            float(d["outlier_ratio"]),
            int(d["seed"]),
            int(d["index"]),
        )
    if task == "twoview":
        m = d["model"]
        return TwoViewSample(
            np.asarray(d["correspondences"], dtype=np.float64).reshape(-1, 4),
            labels,
            np.asarray(m["E"], dtype=np.float64),
            np.asarray(m["R"], dtype=np.float64),
            np.asarray(m["t"], dtype=np.float64),
            float(d["outlier_ratio"]),
            float(d.get("noise_px", 0.0)),
            int(d["seed"]),
            int(d["index"]),
        )
    raise ValueError(f"unknown task tag {task!r}")


def write_dataset(path: str | os.PathLike, samples: Iterable[Sample]) -> None:
    """Write a header line then one JSON object per sample.

    JSON floats use the shortest round-trip repr, so reading back is bitwise exact.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT_TAG, "version": FORMAT_VERSION}) + "\n")
        for s in samples:
            fh.write(json.dumps(_sample_to_dict(s), allow_nan=False) + "\n")


def read_dataset(path: str | os.PathLike) -> list[Sample]:
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed line ({exc.msg})") from None
            if lineno == 1:
                if not isinstance(obj, dict) or obj.get("format") != FORMAT_TAG:
                    raise DatasetFormatError(f"{path}:1: missing dataset header")
                if obj.get("version") != FORMAT_VERSION:
                    raise DatasetFormatError(
                        f"{path}:1: dataset version {obj.get('version')} != supported {FORMAT_VERSION}"
                    )
                continue
            try:
                samples.append(_sample_from_dict(obj))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid sample ({exc})") from None
    return samples
