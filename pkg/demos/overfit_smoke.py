"""
Watching a tiny model learn two blobs
=====================================

Trains a down-scaled network on two synthetic lesion images for a handful
of steps.  Loss should fall fast and the training-split score should climb
well clear of a random baseline — a one-minute sanity check of the whole
optimization path (augmentation, schedule, loss, eval, checkpoints).
"""

import tempfile
from pathlib import Path

from skinmamba.blocks import BlockConfig
from skinmamba.data import make_synthetic_samples
from skinmamba.network import NetworkConfig, build_model
from skinmamba.training import TrainConfig, train

samples = make_synthetic_samples(count=2, size=32, seed=4)
print("lesion share of image:", round(float(samples[0].mask.mean()), 3))

cfg = TrainConfig(epochs=25, batch_size=2, seed=7, deterministic=True)
net = NetworkConfig(
    base_channels=8, input_size=(32, 32),
    block=BlockConfig(channels=8, ssm_state_dim=4),
)
model = build_model(net, seed=7)

with tempfile.TemporaryDirectory() as run_dir:
    manifest = train(
        model, samples, samples, cfg, run_dir,
        image_size=(32, 32), max_steps=25,
    )
    artifacts = sorted(p.name for p in Path(run_dir).iterdir())

losses = manifest.step_losses
print("loss first 3 steps:", [round(v, 4) for v in losses[:3]])
print("loss last 3 steps: ", [round(v, 4) for v in losses[-3:]])
best = manifest.history[manifest.best_epoch - 1]
print("best epoch:", manifest.best_epoch,
      "mIoU:", round(best["test_metrics"]["mIoU"], 4))
print("run artifacts:", artifacts)
