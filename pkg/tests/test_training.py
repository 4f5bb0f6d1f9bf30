import json

import numpy as np
import pytest

from clnet import autodiff as ad
from clnet import data
from clnet import network as net
from clnet import training as tr
from clnet.estimators import evaluate_line
from clnet.geometry import Pose, pose_error_deg
from clnet.pipeline import MAX_LINE_ERROR, infer, sample_error


def small_net(**kw):
    base = dict(channels=8, resnet_depth_pre=1, resnet_depth_mid=1)
    base.update(kw)
    return net.NetConfig(**base)


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(batch_size=0), dict(lambda_reg=-1), dict(d_thr=0), dict(threads=0)):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_training_lowers_loss_over_epochs():
    # pruning makes the loss piecewise smooth, so single steps can go uphill; the trend must not
    ds = data.gen_line_dataset(8, 0.6, seed=2, n_points=200)
    _, metrics = tr.train(ds, small_net(), tr.TrainConfig(epochs=6, batch_size=2, learning_rate=3e-3))
    losses = [m.train_loss for m in metrics]
    assert losses[-1] < 0.9 * losses[0]


def test_batches_per_epoch(monkeypatch):
    calls = []
    real = tr.adam_step

    def counting(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(tr, "adam_step", counting)
    ds = data.gen_line_dataset(10, 0.5, seed=0, n_points=100)
    tr.train(ds, small_net(), tr.TrainConfig(epochs=2, batch_size=4))
    assert len(calls) == 2 * 3


def test_training_is_deterministic(tmp_path):
    ds = data.gen_line_dataset(6, 0.6, seed=3, n_points=150)
    val = data.gen_line_dataset(2, 0.6, seed=4, n_points=150)
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        tr.train(ds, small_net(), tr.TrainConfig(epochs=2, batch_size=3, seed=5), val_dataset=val,
                 checkpoint_dir=tmp_path / name, metrics_path=tmp_path / name / "m.jsonl")
    for ck in ("final.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / ck).read_bytes() == (tmp_path / "b" / ck).read_bytes()
    lines = [json.loads(x) for x in (tmp_path / "a" / "m.jsonl").read_text().splitlines()]
    assert [x["epoch"] for x in lines] == [1, 2]


def test_threaded_training_runs():
    ds = data.gen_line_dataset(4, 0.5, seed=0, n_points=100)
    params, metrics = tr.train(ds, small_net(), tr.TrainConfig(epochs=1, batch_size=4, threads=2))
    assert np.isfinite(metrics[0].train_loss)
    assert all(np.all(np.isfinite(p.data)) for p in params.values())


def test_regression_term_flag():
    s = data.gen_line_sample(0, 0, 0.5, n_points=200)
    cfg = small_net()
    params = net.init_params(cfg, 0)
    with ad.no_grad():
        _, out, used = tr.sample_loss(s, params, cfg, tr.TrainConfig())
    if used:
        assert np.count_nonzero(out.w_final.data > 0) >= 2
    with ad.no_grad():
        _, _, used0 = tr.sample_loss(s, params, cfg, tr.TrainConfig(lambda_reg=0.0))
    assert not used0


def test_no_global_drops_global_terms():
    s = data.gen_line_sample(0, 0, 0.5, n_points=200)
    cfg = small_net(use_global=False)
    params = net.init_params(cfg, 0)
    with ad.no_grad():
        _, out, _ = tr.sample_loss(s, params, cfg, tr.TrainConfig())
    assert all(b.o_global is None for b in out.blocks)
    assert all(b.w_global is b.w_local for b in out.blocks)


def test_evaluate_summary_fields():
    ds = data.gen_line_dataset(3, 0.5, seed=1, n_points=120)
    cfg = small_net()
    summary = tr.evaluate(ds, net.init_params(cfg, 0), cfg)
    assert len(summary["errors"]) == 3 and summary["metric"] == summary["mean_l2"]
    assert 0.0 <= summary["inlier_ratio_post_prune"] <= 1.0


# --- inference pipeline -----------------------------------------------------------


def test_infer_uniform_fallback_when_scores_vanish():
    cfg = small_net()
    params = net.init_params(cfg, 0)
    params["final.mlp2.b"].data[:] = -1e6  # every final logit negative, so every weight is zero
    s = data.gen_line_sample(1, 0, 0.0, n_points=100)
    res = infer(s.points, "line", params, cfg)
    assert res.fallback == "uniform"
    # with no outliers, uniform weights over any candidates recover the line
    assert evaluate_line(res.model, s.gt) < 1e-9
    assert res.inlier_mask.all() and res.inlier_count == 100


def test_infer_reports_degenerate_model():
    cfg = small_net()
    params = net.init_params(cfg, 0)
    # identical points cannot determine a line under any weighting
    res = infer(np.ones((100, 2)), "line", params, cfg)
    assert res.model is None and res.fallback == "degenerate"
    assert not res.inlier_mask.any()
    fake = data.gen_line_sample(0, 0, 0.5, n_points=100)
    assert sample_error(fake, res) == MAX_LINE_ERROR


def test_infer_two_view_all_inliers():
    cfg = small_net(in_dim=4)
    params = net.init_params(cfg, 0)
    s = data.gen_two_view_sample(2, 0, 200, 0.0)
    res = infer(s.correspondences, "twoview", params, cfg)
    # all items are inliers, so any non-degenerate weighting gives the exact model
    assert res.inlier_mask.all()
    assert pose_error_deg(res.pose, Pose(s.R, s.t)) < 1e-3
    assert [len(k) for k in res.kept_chain] == [100, 50]
