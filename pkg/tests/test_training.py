import json
import math

import pytest
import torch
import torch.nn as nn

from skinmamba.blocks import BlockConfig
from skinmamba.data import Sample, make_synthetic_samples
from skinmamba.exceptions import ConfigError, NumericError
from skinmamba.network import NetworkConfig, build_model
from skinmamba.training import (
    RunManifest,
    TrainConfig,
    cosine_lr,
    evaluate,
    loss_bce_dice,
    train,
)

import numpy as np


class ConstantLogits(nn.Module):
    """Stub producing fixed logits; keeps a parameter so AdamW has work."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value
        self.p = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, _, h, w = x.shape
        return torch.full((b, 1, h, w), self.value) + self.p * 0.0


def tiny_model(seed=0):
    cfg = NetworkConfig(
        base_channels=8, input_size=(32, 32),
        block=BlockConfig(channels=8, ssm_state_dim=4),
    )
    return build_model(cfg, seed=seed)


# --- schedule ------------------------------------------------------------------

def test_cosine_lr_endpoints_and_midpoint():
    cfg = TrainConfig()
    assert cosine_lr(0, cfg) == pytest.approx(1e-3)
    assert cosine_lr(cfg.epochs, cfg) == pytest.approx(1e-5)
    assert cosine_lr(cfg.epochs // 2, cfg) == pytest.approx(5.05e-4)


def test_cosine_lr_monotone_nonincreasing():
    cfg = TrainConfig(epochs=40)
    values = [cosine_lr(t, cfg) for t in range(41)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(cfg.lr_min <= v <= cfg.lr0 for v in values)


def test_cosine_lr_range_checked():
    cfg = TrainConfig(epochs=10)
    with pytest.raises(ValueError):
        cosine_lr(-1, cfg)
    with pytest.raises(ValueError):
        cosine_lr(11, cfg)


# --- loss ----------------------------------------------------------------------

def test_loss_confident_correct_is_tiny():
    target = torch.ones(2, 1, 8, 8)
    loss = loss_bce_dice(torch.full_like(target, 20.0), target)
    assert loss.item() < 1e-3


def test_loss_uninformative_logits_value():
    # logits 0 -> p = 0.5 everywhere; half the target is foreground:
    # BCE = ln 2, soft-Dice = 0.5, loss = 0.5 ln 2 + 0.25
    target = torch.zeros(1, 1, 4, 4)
    target[..., :2] = 1.0
    loss = loss_bce_dice(torch.zeros_like(target), target)
    assert loss.item() == pytest.approx(0.5 * math.log(2) + 0.25, abs=1e-6)


def test_loss_ordering_and_shape_check():
    target = torch.zeros(1, 1, 4, 4)
    target[..., :2] = 1.0
    good = loss_bce_dice(torch.where(target > 0, 5.0, -5.0), target)
    bad = loss_bce_dice(torch.where(target > 0, -5.0, 5.0), target)
    assert good.item() < bad.item()
    with pytest.raises(ValueError, match="shape"):
        loss_bce_dice(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_loss_differentiable():
    logits = torch.randn(1, 1, 6, 6, requires_grad=True)
    target = (torch.rand(1, 1, 6, 6) > 0.5).float()
    loss_bce_dice(logits, target).backward()
    assert torch.isfinite(logits.grad).all()


# --- config --------------------------------------------------------------------

def test_train_config_validation():
    TrainConfig().validate()  # defaults are legal
    for bad in (
        TrainConfig(epochs=0),
        TrainConfig(batch_size=0),
        TrainConfig(lr_min=1e-3, lr0=1e-3),
        TrainConfig(early_stop_patience=0),
        TrainConfig(loss="FOCAL"),
    ):
        with pytest.raises(ConfigError):
            bad.validate()


# --- evaluate ------------------------------------------------------------------

def test_evaluate_all_foreground_on_all_foreground_split():
    samples = [
        Sample(image=np.full((16, 16, 3), 90, np.uint8),
               mask=np.ones((16, 16), np.uint8), id=f"s{i}")
        for i in range(2)
    ]
    out = evaluate(ConstantLogits(5.0), samples, image_size=(16, 16))
    m = out["metrics"]
    assert m["mIoU"] == m["DSC"] == m["Acc"] == m["Sen"] == 1.0
    assert m["Spe"] is None
    assert out["n_images"] == 2


def test_evaluate_empty_split_rejected():
    with pytest.raises(ValueError, match="empty"):
        evaluate(ConstantLogits(1.0), [])


# --- train loop ----------------------------------------------------------------

def test_train_early_stops_on_frozen_metric(tmp_path):
    samples = make_synthetic_samples(2, 16, seed=0)
    cfg = TrainConfig(epochs=50, batch_size=2, early_stop_patience=2, seed=1)
    manifest = train(
        ConstantLogits(3.0), samples, samples, cfg, tmp_path / "run",
        image_size=(16, 16),
    )
    # metric never improves after the first epoch: 1 + patience epochs total
    assert len(manifest.history) == 3
    assert manifest.best_epoch == 1
    assert (tmp_path / "run" / "best.ckpt").is_file()
    assert (tmp_path / "run" / "last.ckpt").is_file()
    reloaded = RunManifest.load(tmp_path / "run" / "manifest.json")
    assert reloaded.best_epoch == 1
    assert reloaded.step_losses == manifest.step_losses


def test_train_max_steps_caps_run(tmp_path):
    samples = make_synthetic_samples(4, 16, seed=1)
    cfg = TrainConfig(epochs=50, batch_size=2, seed=1)
    manifest = train(
        ConstantLogits(0.5), samples, samples, cfg, tmp_path / "run",
        image_size=(16, 16), max_steps=3,
    )
    assert len(manifest.step_losses) == 3
    assert manifest.timings["steps"] == 3


def test_train_writes_config_before_stepping(tmp_path):
    samples = make_synthetic_samples(2, 16, seed=2)
    cfg = TrainConfig(epochs=2, batch_size=2)
    with pytest.raises(NumericError, match="epoch 1 batch 0"):
        train(ConstantLogits(float("nan")), samples, samples, cfg,
              tmp_path / "run", image_size=(16, 16))
    snapshot = json.loads((tmp_path / "run" / "config.json").read_text())
    assert snapshot["train"]["epochs"] == 2
    assert len(snapshot["normalization"]["mean"]) == 3
    assert (tmp_path / "run" / "manifest.json").is_file()


def test_train_history_lr_follows_schedule(tmp_path):
    samples = make_synthetic_samples(2, 16, seed=3)
    cfg = TrainConfig(epochs=4, batch_size=2, early_stop_patience=50)
    manifest = train(ConstantLogits(1.0), samples, samples, cfg,
                     tmp_path / "run", image_size=(16, 16))
    assert [row["epoch"] for row in manifest.history] == [1, 2, 3, 4]
    for row in manifest.history:
        assert row["lr"] == pytest.approx(cosine_lr(row["epoch"] - 1, cfg))


def test_train_loss_decreases_on_real_model(tmp_path):
    samples = make_synthetic_samples(2, 32, seed=4)
    cfg = TrainConfig(epochs=25, batch_size=2, seed=7)
    model = tiny_model(seed=7)
    manifest = train(model, samples, samples, cfg, tmp_path / "run",
                     image_size=(32, 32), max_steps=25)
    losses = manifest.step_losses
    assert len(losses) == 25
    assert losses[-1] < losses[0] - 0.2


def test_train_empty_splits_rejected(tmp_path):
    samples = make_synthetic_samples(2, 16, seed=5)
    with pytest.raises(ValueError, match="train"):
        train(ConstantLogits(1.0), [], samples, TrainConfig(), tmp_path / "a",
              image_size=(16, 16))
    with pytest.raises(ValueError, match="test"):
        train(ConstantLogits(1.0), samples, [], TrainConfig(), tmp_path / "b",
              image_size=(16, 16))
