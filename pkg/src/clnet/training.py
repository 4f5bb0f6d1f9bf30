"""Mini-batch training loop, validation and run metrics."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .geometry import auc_at_thresholds, point_line_distance, symmetric_epipolar_distance
from .network import NetConfig, clnet_forward, init_params, save_checkpoint
from .objective import (
    AdamState,
    adam_step,
    adaptive_temperature,
    classification_loss,
    regression_loss,
    total_loss,
    weighted_essential_tensor,
    weighted_line_tensor,
)
from .pipeline import default_d_thr, infer, sample_error

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "RunMetrics", "TrainingError", "sample_loss", "train", "evaluate", "resolve_threads"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    lambda_reg: float = 0.5
    d_thr: float | None = None  # task default when unset
    alpha: float = 1.0
    seed: int = 0
    use_temperature: bool = True
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be nonnegative")
        if self.d_thr is not None and not self.d_thr > 0:
            raise ValueError("d_thr must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class RunMetrics:
    epoch: int
    train_loss: float
    val_metric: float | None
    inlier_ratio_post_prune: float | None
    wall_time_ms: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d.update(d.pop("extra"))
        return json.dumps(d, sort_keys=True)


def resolve_threads(value: int | None) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("CLNET_THREADS")
    return int(env) if env else 1


def _distances(sample) -> np.ndarray:
    if sample.task == "line":
        return point_line_distance(sample.gt, sample.points)
    return symmetric_epipolar_distance(sample.E, sample.correspondences)


def sample_loss(sample, params, net_config: NetConfig, cfg: TrainConfig):
    """Loss on one sample, plus the forward output and whether the regression term applied."""
    items = sample.items
    labels = sample.labels.astype(np.float64)
    d_thr = cfg.d_thr if cfg.d_thr is not None else default_d_thr(sample.task)
    tau = adaptive_temperature(_distances(sample), d_thr, cfg.alpha) if cfg.use_temperature else None

    out = clnet_forward(items, params, net_config)

    def pick(idx):
        return labels[idx], (None if tau is None else tau[idx])

    terms = []
    for b in out.blocks:
        y, t = pick(b.input_index)
        terms.append((b.o_local, y, t))
        if b.o_global is not None:
            terms.append((b.o_global, y, t))
    y, t = pick(out.candidates)
    terms.append((out.o_final, y, t))
    cls = classification_loss(terms)

    cand_items = items[out.candidates]
    reg = None
    if cfg.lambda_reg > 0:
        if sample.task == "line":
            est = weighted_line_tensor(cand_items, out.w_final)
            if est is not None:
                reg = regression_loss(est, sample.gt)
        else:
            est = weighted_essential_tensor(cand_items, out.w_final)
            if est is not None and sample.labels.any():
                reg = regression_loss(est, sample.gt_model, items[sample.labels])
        if reg is None:
            log.debug("regression term skipped for sample %d (degenerate weights)", sample.index)
    return total_loss(cls, reg, cfg.lambda_reg), out, reg is not None


def evaluate(samples, params, net_config: NetConfig, d_thr: float | None = None) -> dict:
    """Pipeline metrics over a dataset: per-sample errors, their summary, and candidate inlier ratio."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    task = samples[0].task
    errors, ratios, fallbacks = [], [], 0
    for s in samples:
        res = infer(s.items, task, params, net_config, d_thr)
        errors.append(sample_error(s, res))
        ratios.append(float(s.labels[res.candidates].mean()))
        fallbacks += res.fallback is not None
    summary = {"errors": errors, "inlier_ratio_post_prune": float(np.mean(ratios)), "fallbacks": fallbacks}
    if task == "line":
        summary["mean_l2"] = float(np.mean(errors))
        summary["metric"] = summary["mean_l2"]
    else:
        auc = auc_at_thresholds(errors, (5, 10, 20))
        summary["auc"] = auc
        summary["metric"] = auc[0]
    return summary


def _is_better(task: str, new: float, best: float | None) -> bool:
    if best is None:
        return True
    return new < best if task == "line" else new > best


def train(
    dataset,
    net_config: NetConfig,
    cfg: TrainConfig,
    val_dataset=None,
    metrics_path=None,
    checkpoint_dir=None,
    params=None,
    on_epoch=None,
):
    """Adam over seeded shuffled mini-batches; one step per batch with the mean sample gradient.

    Returns ``(params, metrics)``. With ``checkpoint_dir`` set, writes
    ``final.ckpt`` and, when validating, ``best.ckpt``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    task = dataset[0].task
    if any(s.task != task for s in dataset):
        raise ValueError("training dataset mixes tasks")
    params = init_params(net_config, cfg.seed) if params is None else params
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    metrics: list[RunMetrics] = []
    best = None
    echo = {"net": net_config.to_dict(), "train": asdict(cfg), "task": task}
    if metrics_path is not None:
        open(metrics_path, "w").close()

    def run_one(sample):
        loss, _, _ = sample_loss(sample, params, net_config, cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss on sample {sample.index}")
        ad.backward(loss)
        return value

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        with threadpool_limits(limits=cfg.threads):
            for epoch in range(1, cfg.epochs + 1):
                start = time.perf_counter()
                order = rng.permutation(len(dataset))
                losses = []
                for b0 in range(0, len(order), cfg.batch_size):
                    batch = [dataset[i] for i in order[b0 : b0 + cfg.batch_size]]
                    for p in params.values():
                        p.zero_grad()
                    try:
                        if pool is None:
                            values = [run_one(s) for s in batch]
                        else:
                            values = list(pool.map(run_one, batch))
                    except Exception as exc:
                        raise TrainingError(f"epoch {epoch}, batch {b0 // cfg.batch_size}: {exc}") from exc
                    losses.extend(values)
                    grads = {n: (p.grad / len(batch) if p.grad is not None else None) for n, p in params.items()}
                    adam_step(params, grads, state, cfg.learning_rate)
                val_metric = ratio = None
                extra = {}
                if val_dataset:
                    summary = evaluate(val_dataset, params, net_config, cfg.d_thr)
                    val_metric, ratio = summary["metric"], summary["inlier_ratio_post_prune"]
                    if "auc" in summary:
                        extra["val_auc"] = summary["auc"]
                    if checkpoint_dir is not None and _is_better(task, val_metric, best):
                        best = val_metric
                        save_checkpoint(os.path.join(checkpoint_dir, "best.ckpt"), params, net_config,
                                        {**echo, "epoch": epoch, "val_metric": val_metric})
                m = RunMetrics(epoch, float(np.mean(losses)), val_metric, ratio,
                               (time.perf_counter() - start) * 1000.0, extra)
                metrics.append(m)
                log.info("epoch %d loss %.5f val %s", epoch, m.train_loss, val_metric)
                if metrics_path is not None:
                    with open(metrics_path, "a") as fh:
                        fh.write(m.to_json() + "\n")
                if on_epoch is not None:
                    on_epoch(m)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_dir is not None:
        save_checkpoint(os.path.join(checkpoint_dir, "final.ckpt"), params, net_config,
                        {**echo, "epoch": cfg.epochs})
    return params, metrics
