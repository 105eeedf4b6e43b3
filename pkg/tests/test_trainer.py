import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from spotnet.net import ModelConfig, load_checkpoint
from spotnet.trainer import (ABLATION_ROWS, TrainConfig, TrainingDiverged, TrainingError, ablate, compute_losses,
                             evaluate, make_batch, reload_and_evaluate, smoothed_endpoints, synthetic_dataset,
                             train)
from spotnet.videogen import SceneConfig

TINY = ModelConfig(n_stacks=1, base_channels=16, hourglass_depth=2)


@pytest.fixture(scope="module")
def small_set():
    scene = SceneConfig(image_size=(64, 64), n_objects=2, object_size_range=(10, 18), camera_pan=(1, 1),
                        n_frames=6, seed=3)
    return synthetic_dataset(scene)


def _cfg(**kw):
    base = dict(model=TINY, n_iters=6, checkpoint_every=3, batch_size=2)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    cfg = TrainConfig()
    assert cfg.wh_weight == 0.1 and cfg.seg_weight == 1.0
    assert cfg.lr == 2.5e-4 and cfg.batch_size == 4
    with pytest.raises(ValueError):
        replace(cfg, lr=0.0).validate()


def test_config_round_trip():
    cfg = _cfg(seed=5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_same_seed_same_trace(small_set):
    a = train(small_set, _cfg())
    b = train(small_set, _cfg())
    assert a.trace().tolist() == b.trace().tolist()
    assert np.isfinite(a.trace()).all()


def test_outputs_written(small_set, tmp_path):
    res = train(small_set, _cfg(), tmp_path)
    assert res.checkpoint == tmp_path / "checkpoint.pt"
    assert (tmp_path / "checkpoint_000003.pt").exists()
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 6
    assert list(rows[0]) == ["iteration", "heat", "off", "seg", "wh", "total"]


def test_baseline_logs_zero_seg(small_set):
    model = replace(TINY, attention_enabled=False, multitask_enabled=False)
    res = train(small_set, _cfg(model=model))
    assert all(r["seg"] == 0.0 for r in res.log)


def test_multitask_without_masks_fails_early(small_set):
    bare = replace(small_set, masks=None)
    with pytest.raises(TrainingError, match="masks"):
        train(bare, _cfg())
    # the baseline needs no masks
    train(bare, _cfg(n_iters=1, model=replace(TINY, attention_enabled=False, multitask_enabled=False)))


def test_non_finite_loss_aborts(small_set):
    with pytest.raises(TrainingDiverged, match="iteration 2"):
        train(small_set, _cfg(lr=float("inf")))
    poisoned = replace(small_set, images=small_set.images * float("nan"))
    with pytest.raises(TrainingDiverged):
        train(poisoned, _cfg())


def _seg_grads(small_set, attention):
    torch.manual_seed(0)
    from spotnet.net import SpotNet
    cfg = _cfg(seg_weight=0.0, model=replace(TINY, attention_enabled=attention))
    model = SpotNet(cfg.model)
    parts = compute_losses(model, make_batch(small_set, [0, 1]), cfg)
    parts.total.backward()
    seg = sum(p.grad.abs().sum() for p in model.seg.parameters() if p.grad is not None)
    det = sum(p.grad.abs().sum() for p in model.heat_head.parameters())
    return float(seg), float(det)


def test_zero_seg_weight_gradients(small_set):
    seg, det = _seg_grads(small_set, attention=False)
    assert seg == 0.0 and det > 0
    # with attention on, the seg head is still trained through the detection losses
    seg, det = _seg_grads(small_set, attention=True)
    assert seg > 0 and det > 0


def test_checkpoint_reproduces_detections(small_set, tmp_path):
    res = train(small_set, _cfg(), tmp_path)
    before = evaluate(res.model, small_set, score_thresh=0.0)
    after = reload_and_evaluate(res.checkpoint, small_set)
    model, extra = load_checkpoint(res.checkpoint)
    assert extra["train_config"]["n_iters"] == 6
    again = evaluate(model, small_set, score_thresh=0.0)
    assert before.detections == again.detections
    assert after.map == evaluate(res.model, small_set).map


def test_smoothed_endpoints():
    trace = np.concatenate([np.full(100, 4.0), np.full(100, 1.0)])
    assert smoothed_endpoints(trace) == (4.0, 1.0)
    assert smoothed_endpoints(np.arange(10.0), window=2) == (0.5, 8.5)


def test_ablation_structure(small_set, tmp_path):
    rep = ablate(small_set, small_set, _cfg(n_iters=2), tmp_path)
    assert [(r.attention, r.multitask) for r in rep.rows] == [(a, m) for _, a, m in ABLATION_ROWS]
    assert [(r.attention, r.multitask) for r in rep.rows] == [(True, True), (False, True), (False, False)]
    assert rep.eval_frames == len(small_set)
    for name in ("ablation.json", "ablation.txt", "ablation.csv", "pr_curves.csv", "pr_curves.png"):
        assert (tmp_path / name).exists()
    for r in rep.rows:
        assert reload_and_evaluate(r.checkpoint, small_set).map == r.map
