"""Training objective: temperature-scaled classification, model regression and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .estimators import epipolar_design_matrix
from .geometry import EssentialMatrix, LineModel

__all__ = [
    "adaptive_temperature",
    "classification_loss",
    "weighted_line_tensor",
    "weighted_essential_tensor",
    "regression_loss",
    "total_loss",
    "AdamState",
    "adam_step",
]


def adaptive_temperature(d, d_thr: float, alpha: float = 1.0):
    """``exp(-|d - d_thr| / (alpha d_thr))`` below the threshold, 1 at or above it.

    Accepts a scalar or an array of distances.
    """
    if d_thr <= 0 or alpha <= 0:
        raise ValueError("d_thr and alpha must be positive")
    arr = np.asarray(d, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("distances must be nonnegative")
    tau = np.where(arr < d_thr, np.exp(-np.abs(arr - d_thr) / (alpha * d_thr)), 1.0)
    return float(tau) if tau.ndim == 0 else tau


def _bce_term(logits: Tensor, labels, tau) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"classification_loss: logits {logits.shape} vs labels {y.shape}")
    z = logits if tau is None else logits * np.asarray(tau, dtype=np.float64)
    return ad.bce_with_logits(z, y)


def classification_loss(terms) -> Tensor:
    """Sum of mean-reduced BCE terms.

    ``terms`` is an iterable of ``(logits, labels, tau)``; ``tau`` may be
    ``None`` for plain BCE. Each term scores ``sigmoid(tau * logits)``.
    """
    total = None
    for logits, labels, tau in terms:
        t = _bce_term(ad.as_tensor(logits), labels, tau)
        total = t if total is None else total + t
    if total is None:
        raise ValueError("classification_loss needs at least one term")
    return total


def _weighted_scatter(h: np.ndarray, w: Tensor) -> Tensor:
    m = h.shape[0]
    return ad.matmul(ad.transpose(ad.as_tensor(h) * ad.reshape(w, (m, 1))), h)


def _eig_ok(scatter: np.ndarray, rank_needed: int) -> bool:
    lam = np.linalg.eigvalsh(0.5 * (scatter + scatter.T))
    top = max(lam[-1], 1e-300)
    # the perturbation backward divides by the gap to the next eigenvalue
    return lam[1] - lam[0] > 1e-10 * top and lam[-rank_needed] > 1e-12 * top


def weighted_line_tensor(points, w: Tensor) -> Tensor | None:
    """Differentiable weighted line fit: unit ``(a, b, c)`` or ``None`` when degenerate."""
    pts = np.asarray(points, dtype=np.float64)
    if int(np.count_nonzero(w.data > 0)) < 2:
        return None
    h = np.column_stack([pts, np.ones(len(pts))])
    scatter = _weighted_scatter(h, w)
    if not _eig_ok(scatter.data, 2):
        return None
    return ad.eigh_smallest(scatter)


def weighted_essential_tensor(correspondences, w: Tensor) -> Tensor | None:
    """Differentiable weighted eight-point null vector (row-major ``vec(E)``), or ``None``."""
    if int(np.count_nonzero(w.data > 0)) < 8:
        return None
    X = epipolar_design_matrix(correspondences)
    scatter = _weighted_scatter(X, w)
    if not _eig_ok(scatter.data, 8):
        return None
    return ad.eigh_smallest(scatter)


def regression_loss(est, gt, inlier_items=None) -> Tensor:
    """Geometric loss between an estimated and a ground-truth model.

    Lines: squared distance between sign-canonicalized unit ``(a, b, c)``.
    Essential matrices: mean squared ``x'^T E x`` over ``inlier_items``.
    ``est`` may be a Tensor (differentiable) or a model instance.
    """
    if isinstance(gt, LineModel):
        if isinstance(est, EssentialMatrix):
            raise TypeError("regression_loss: line ground truth with an essential estimate")
        v = ad.as_tensor(est.as_array() if isinstance(est, LineModel) else est)
        if v.shape != (3,):
            raise ShapeError(f"regression_loss: line estimate must have 3 entries, got {v.shape}")
        if not np.any(v.data):
            raise ValueError("regression_loss: zero line estimate")
        unit = v / ad.sqrt(ad.sum(v * v))
        # same rule as canonical lines: first nonzero coefficient positive
        sign = 1.0 if v.data[np.flatnonzero(v.data)[0]] > 0 else -1.0
        diff = unit * sign - gt.as_array()
        return ad.sum(diff * diff)
    if isinstance(gt, EssentialMatrix):
        if isinstance(est, LineModel):
            raise TypeError("regression_loss: essential ground truth with a line estimate")
        e = ad.as_tensor(est.matrix if isinstance(est, EssentialMatrix) else est)
        e = ad.reshape(e, (9,))
        if inlier_items is None or len(inlier_items) == 0:
            raise ValueError("regression_loss: essential task needs ground-truth inliers")
        r = ad.matmul(epipolar_design_matrix(inlier_items), e)
        return ad.mean(r * r)
    raise TypeError(f"unsupported ground-truth model {type(gt).__name__}")


def total_loss(cls, reg, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    cls = ad.as_tensor(cls)
    if reg is None or lam == 0:
        return cls
    return cls + ad.as_tensor(reg) * lam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. ``grads`` maps names to arrays."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
