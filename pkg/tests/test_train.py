import numpy as np
import pytest
import torch
import torch.nn as nn

from rfssl.data import PhantomConfig, generate_phantom_frame
from rfssl.nn import Architecture, ModelState, ScheduleConfig
from rfssl.rf_signal import AugmentationConfig
from rfssl.train import DivergenceError, TrainRun, ValidationSet, finetune, pretrain, predict_core

ARCH = Architecture.preset("tiny", input_size=16, stage_channels=(8, 16), stage_blocks=(1, 1), stem_channels=8)
SMALL_PHANTOM = PhantomConfig(axial_count=256, lateral_count=64)


def toy_patches(n, seed=0):
    return np.random.default_rng(seed).random((n, 16, 16)).astype(np.float32)


def test_pretrain_curve_is_deterministic():
    x = toy_patches(64)
    curves = []
    for _ in range(2):
        run = TrainRun(epochs=2, batch_size=16, seed=3)
        _, curve = pretrain(run, x, ModelState(ARCH, seed=1))
        curves.append(curve)
    assert len(curves[0]) == 2
    assert curves[0] == curves[1]


@pytest.mark.parametrize("loss", ["simclr", "byol"])
def test_pretrain_other_losses_run(loss):
    run = TrainRun(epochs=1, batch_size=16, loss=loss, predictor_hidden=32)
    _, curve = pretrain(run, toy_patches(32), ModelState(ARCH))
    assert np.isfinite(curve).all()


def test_pretrain_divergence_is_reported():
    x = toy_patches(32)
    x[3, 2, 2] = np.nan
    run = TrainRun(epochs=1, batch_size=32, augmentation=AugmentationConfig(skip_probability=1.0))
    with pytest.raises(DivergenceError):
        pretrain(run, x, ModelState(ARCH))


def test_linear_finetune_freezes_backbone_and_projector():
    m = ModelState(ARCH, seed=2)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    x = toy_patches(40)
    y = np.arange(40) % 2
    run = TrainRun(mode="linear_finetune", epochs=2, batch_size=8, augmentation=None)
    m, _ = finetune(run, x, y, m)
    after = m.state_dict()
    for k, v in before.items():
        if k.startswith("head."):
            continue
        assert torch.equal(v, after[k]), k
    assert not torch.equal(before["head.weight"], after["head.weight"])


def test_linear_probe_separates_toy_embeddings():
    m = ModelState(ARCH, seed=0)
    # identity backbone on 1 x 2 "patches": the head sees the raw 2D points
    m.backbone = nn.Flatten()
    m.head = nn.Linear(2, 2)
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(200, 2))
    pts = pts[np.abs(pts[:, 0] + pts[:, 1]) > 0.3]
    y = (pts[:, 0] + pts[:, 1] > 0).astype(int)
    x = pts[:, None, :].astype(np.float32)
    run = TrainRun(
        mode="linear_finetune", epochs=50, batch_size=16, augmentation=None,
        schedule=ScheduleConfig(base_lr=0.05, total_epochs=50, warmup_epochs=5),
    )
    m, _ = finetune(run, x, y, m)
    with torch.no_grad():
        pred = m.head(torch.from_numpy(pts).float()).argmax(1).numpy()
    assert (pred == y).mean() == 1.0


def test_best_epoch_is_restored():
    m = ModelState(ARCH, seed=5)
    x, y = toy_patches(32), np.arange(32) % 2
    snapshots = {}

    def scorer(model, epoch):
        snapshots[epoch] = {k: v.clone() for k, v in model.state_dict().items()}
        return [0.1, 0.5, 0.6, 0.9, 0.7, 0.2][epoch]

    run = TrainRun(mode="semisup_finetune", epochs=6, batch_size=8, augmentation=None)
    m, curve = finetune(run, x, y, m, val_scorer=scorer)
    assert [c[1] for c in curve] == [0.1, 0.5, 0.6, 0.9, 0.7, 0.2]
    for k, v in m.state_dict().items():
        assert torch.equal(v, snapshots[3][k]), k


def test_finetune_needs_both_classes():
    run = TrainRun(mode="linear_finetune", epochs=1)
    with pytest.raises(ValueError):
        finetune(run, toy_patches(4), np.zeros(4), ModelState(ARCH))


def test_finetune_uses_validation_set():
    x, y = toy_patches(24), np.arange(24) % 2
    val = ValidationSet(toy_patches(10, seed=1), np.arange(10) % 2)
    run = TrainRun(mode="linear_finetune", epochs=2, batch_size=8, augmentation=None)
    _, curve = finetune(run, x, y, ModelState(ARCH), val=val)
    assert all(0.0 <= auc <= 1.0 for _, auc in curve)


def constant_model(p_cancer):
    m = ModelState(ARCH)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.copy_(torch.tensor([0.0, float(np.log(p_cancer / (1 - p_cancer)))]))
    return m


def test_predict_core_counts_patch_classes():
    core = generate_phantom_frame(1, np.random.default_rng(0), SMALL_PHANTOM)
    pred = predict_core(constant_model(0.8), core, stride_mm=2.0)
    assert len(pred.patch_classes) > 0
    assert pred.core_probability == 1.0
    pred = predict_core(constant_model(0.2), core, stride_mm=2.0)
    assert pred.core_probability == 0.0


def test_predict_core_empty_needle():
    core = generate_phantom_frame(0, np.random.default_rng(0), SMALL_PHANTOM)
    core.needle_mask[:] = False
    pred = predict_core(constant_model(0.8), core)
    assert pred.empty and np.isnan(pred.core_probability)


def test_train_run_validation():
    with pytest.raises(ValueError):
        TrainRun(loss="moco")
    with pytest.raises(ValueError):
        TrainRun(mode="distill")
    with pytest.raises(ValueError):
        TrainRun(epochs=5, schedule=ScheduleConfig(total_epochs=6))
