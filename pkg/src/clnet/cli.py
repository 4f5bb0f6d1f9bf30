"""``clnet`` command line: gen, train, eval, infer, config.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import replace

import numpy as np

from . import data
from .autodiff import ShapeError
from .config import ABLATIONS, apply_ablations, defaults_json, load_config
from .estimators import full_size_verification
from .geometry import DegenerateModelError, GeometryError, LineModel, Pose, auc_at_thresholds
from .network import CheckpointError, ConfigError, load_checkpoint
from .pipeline import InferenceResult, default_d_thr, infer, sample_error
from .training import TrainingError, resolve_threads, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("clnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ratio(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"outlier ratio must lie in [0, 1), got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clnet", description="Consensus learning for correspondence pruning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("task", choices=("line", "twoview"))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--outlier-ratio", type=_ratio, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-points", type=int, default=None, help="items per sample (line: 1000, twoview: 1000)")
    g.add_argument("--noise-px", type=float, default=0.0, help="two-view inlier noise in pixels")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    t.add_argument("--threads", type=int, default=None, help="worker threads (default: $CLNET_THREADS or 1)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one or more datasets")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", nargs="+", required=True)
    e.add_argument("--out")
    e.add_argument("--d-thr", type=float, default=None)
    e.add_argument("--oracle", choices=("gt",), help="bypass the network and use the ground-truth model")

    i = sub.add_parser("infer", help="write per-sample predictions")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--d-thr", type=float, default=None)

    c = sub.add_parser("config", help="configuration helpers")
    c.add_argument("--print-defaults", action="store_true")
    return parser


# --- commands ---------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.task == "line":
        samples = data.gen_line_dataset(args.count, args.outlier_ratio, args.seed, args.n_points or data.LINE_POINTS)
    else:
        samples = data.gen_two_view_dataset(args.count, args.n_points or 1000, args.outlier_ratio, args.noise_px,
                                            args.seed)
    data.write_dataset(args.out, samples)
    print(f"wrote {len(samples)} {args.task} samples to {args.out}")
    return EXIT_OK


def _read(path, task=None):
    samples = data.read_dataset(path)
    if not samples:
        raise data.DatasetFormatError(f"{path}: dataset is empty")
    if task is not None and any(s.task != task for s in samples):
        raise data.DatasetFormatError(f"{path}: expected {task} samples")
    return samples


def cmd_train(args) -> int:
    cfg = apply_ablations(load_config(args.config), args.ablate)
    cfg = replace(cfg, train=replace(cfg.train, threads=resolve_threads(args.threads)))
    paths = cfg.paths
    if not paths.get("train"):
        raise ConfigError("paths.train is required for training")
    trn = _read(paths["train"], cfg.task)
    val = _read(paths["val"], cfg.task) if paths.get("val") else None
    ckpt_dir = paths.get("checkpoint_dir") or "checkpoints"
    os.makedirs(ckpt_dir, exist_ok=True)
    metrics_path = paths.get("metrics") or os.path.join(ckpt_dir, "metrics.jsonl")

    def report(m):
        val_txt = "-" if m.val_metric is None else f"{m.val_metric:.6g}"
        print(f"epoch {m.epoch}: train_loss {m.train_loss:.6f} val {val_txt} ({m.wall_time_ms / 1000:.1f}s)",
              flush=True)

    train(trn, cfg.net, cfg.train, val, metrics_path, ckpt_dir, on_epoch=report)
    print(f"checkpoints in {ckpt_dir}; metrics in {metrics_path}")
    return EXIT_OK


def _prf(mask: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    tp = int(np.sum(mask & labels))
    p = tp / int(mask.sum()) if mask.any() else 0.0
    r = tp / int(labels.sum()) if labels.any() else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _oracle_result(sample, d_thr: float) -> InferenceResult:
    model = sample.gt_model
    mask, count = full_size_verification(model, sample.items, d_thr)
    pose = None if sample.task == "line" else Pose(sample.R, sample.t)
    return InferenceResult(model, mask, count, np.arange(len(sample.items)), np.ones(len(sample.items)), None, pose)


def _model_json(model):
    if model is None:
        return None
    if isinstance(model, LineModel):
        return {"a": model.a, "b": model.b, "c": model.c}
    return {"E": model.matrix.tolist()}


def _check_compat(net_cfg, samples, path):
    want = 2 if samples[0].task == "line" else 4
    if net_cfg.in_dim != want:
        raise CheckpointError(f"checkpoint expects {net_cfg.in_dim}-D items but {path} holds {want}-D items")


def cmd_eval(args) -> int:
    if args.oracle is None and not args.checkpoint:
        raise UsageError("eval needs --checkpoint unless --oracle is given")
    params = net_cfg = None
    if args.checkpoint:
        params, net_cfg, _ = load_checkpoint(args.checkpoint)
    rows, groups = [], defaultdict(list)
    task = None
    for path in args.dataset:
        samples = _read(path)
        task = task or samples[0].task
        if samples[0].task != task:
            raise data.DatasetFormatError(f"{path}: cannot mix tasks in one evaluation")
        if net_cfg is not None and args.oracle is None:
            _check_compat(net_cfg, samples, path)
        d_thr = args.d_thr if args.d_thr is not None else default_d_thr(task)
        for s in samples:
            if args.oracle == "gt":
                res = _oracle_result(s, d_thr)
            else:
                res = infer(s.items, task, params, net_cfg, d_thr)
            p, r, f = _prf(res.inlier_mask, s.labels)
            row = {
                "dataset": path,
                "index": s.index,
                "outlier_ratio": s.outlier_ratio,
                "error": sample_error(s, res),
                "precision": p,
                "recall": r,
                "f1": f,
                "block_inlier_ratio": [float(s.labels[k].mean()) for k in res.kept_chain],
                "candidate_inlier_ratio": float(s.labels[res.candidates].mean()),
                "fallback": res.fallback,
            }
            rows.append(row)
            groups[s.outlier_ratio].append(row)

    aggregates = []
    for ratio in sorted(groups):
        rs = groups[ratio]
        errs = [r["error"] for r in rs]
        agg = {
            "outlier_ratio": ratio,
            "count": len(rs),
            "precision": float(np.mean([r["precision"] for r in rs])),
            "recall": float(np.mean([r["recall"] for r in rs])),
            "f1": float(np.mean([r["f1"] for r in rs])),
            "candidate_inlier_ratio": float(np.mean([r["candidate_inlier_ratio"] for r in rs])),
        }
        if rs[0]["block_inlier_ratio"]:
            agg["block_inlier_ratio"] = np.mean([r["block_inlier_ratio"] for r in rs], axis=0).tolist()
        if task == "line":
            agg["mean_l2"] = float(np.mean(errs))
        else:
            agg["auc"] = auc_at_thresholds(errs, (5, 10, 20))
        aggregates.append(agg)

    report = {"task": task, "aggregates": aggregates, "samples": rows}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
    _print_table(task, aggregates)
    return EXIT_OK


def _print_table(task, aggregates) -> None:
    metric = "mean_L2" if task == "line" else "AUC@5/10/20"
    print(f"{'outliers':>8} {'n':>5} {metric:>20} {'cand_inl':>9} {'P':>6} {'R':>6} {'F1':>6}")
    for a in aggregates:
        m = f"{a['mean_l2']:.6f}" if task == "line" else "/".join(f"{x:.2f}" for x in a["auc"])
        print(f"{a['outlier_ratio']:>8.2f} {a['count']:>5d} {m:>20} {a['candidate_inlier_ratio']:>9.3f} "
              f"{a['precision']:>6.3f} {a['recall']:>6.3f} {a['f1']:>6.3f}")


def cmd_infer(args) -> int:
    params, net_cfg, _ = load_checkpoint(args.checkpoint)
    samples = _read(args.dataset)
    _check_compat(net_cfg, samples, args.dataset)
    task = samples[0].task
    with open(args.out, "w", encoding="utf-8") as fh:
        for s in samples:
            res = infer(s.items, task, params, net_cfg, args.d_thr)
            fh.write(json.dumps({
                "index": s.index,
                "kept": [k.tolist() for k in res.kept_chain],
                "candidates": res.candidates.tolist(),
                "w_hat": res.weights.tolist(),
                "model": _model_json(res.model),
                "mask": res.inlier_mask.tolist(),
                "inlier_count": res.inlier_count,
                "fallback": res.fallback,
            }) + "\n")
    print(f"wrote predictions for {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    if not args.print_defaults:
        raise UsageError("config: nothing to do (try --print-defaults)")
    print(defaults_json())
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "config": cmd_config}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"clnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, DegenerateModelError, FloatingPointError) as exc:
        print(f"clnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, data.DatasetFormatError, GeometryError, ShapeError, OSError,
            ValueError) as exc:
        print(f"clnet: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
