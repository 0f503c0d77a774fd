"""Training protocol: loss, schedule, evaluation loop, checkpoints.

Optimization follows AdamW (lr 1e-3, betas 0.9/0.999, weight decay 1e-4)
with cosine-annealed learning rate over the configured epoch budget, an
equal-weighted BCE + soft-Dice loss on logits, per-epoch evaluation on the
test split, best-checkpoint selection by test mIoU, and early stopping when
mIoU fails to improve for `early_stop_patience` epochs.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .data import augment, compute_normalization, preprocess
from .exceptions import ConfigError, NumericError
from .metrics import ConfusionCounts, accumulate, compute_metrics

__all__ = [
    "TrainConfig",
    "RunManifest",
    "cosine_lr",
    "loss_bce_dice",
    "train",
    "evaluate",
]

DICE_EPS = 1e-5
LOSS_KINDS = ("BCE_DICE",)


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults match the reference protocol."""

    epochs: int = 300
    batch_size: int = 32
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 42
    early_stop_patience: int = 50
    lr_min: float = 1e-5
    loss: str = "BCE_DICE"
    deterministic: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_min < self.lr0:
            raise ConfigError(
                f"lr_min ({self.lr_min}) must be below lr0 ({self.lr0})"
            )
        if self.early_stop_patience < 1:
            raise ConfigError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}"
            )
        if self.loss not in LOSS_KINDS:
            raise ConfigError(
                f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}"
            )


@dataclass
class RunManifest:
    """Everything recorded about one training run."""

    config: dict
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_epoch: int | None = None
    checkpoints: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate at epoch index t in [0, epochs]."""
    if not 0 <= t <= cfg.epochs:
        raise ValueError(f"epoch index {t} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (
        1.0 + math.cos(math.pi * t / cfg.epochs)
    )


def loss_bce_dice(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Equal-weighted BCE-with-logits plus soft-Dice complement.

    soft-Dice = (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps) with
    p = sigmoid(logits) and global sums; eps = 1e-5.
    """
    if logits.shape != target.shape:
        raise ValueError(
            f"loss shape mismatch: logits {tuple(logits.shape)} "
            f"vs target {tuple(target.shape)}"
        )
    bce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits)
    dice = (2.0 * (p * target).sum() + DICE_EPS) / (p.sum() + target.sum() + DICE_EPS)
    return 0.5 * bce + 0.5 * (1.0 - dice)


def _eval_tensors(model, images: torch.Tensor, masks: torch.Tensor,
                  batch_size: int) -> dict:
    model.eval()
    counts = ConfusionCounts()
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = model(images[start:start + batch_size])
            pred = (logits > 0).to(torch.uint8).squeeze(1).numpy()
            gt = masks[start:start + batch_size].to(torch.uint8).squeeze(1).numpy()
            counts = accumulate(pred, gt, counts)
    return {
        "n_images": int(images.shape[0]),
        "counts": counts.as_dict(),
        "metrics": compute_metrics(counts),
    }


def _preprocess_stack(samples, image_size, mean, std):
    pairs = [preprocess(s, size=image_size, mean=mean, std=std) for s in samples]
    images = torch.stack([im for im, _ in pairs])
    masks = torch.stack([mk for _, mk in pairs])
    return images, masks


def evaluate(model, samples, *, image_size=(224, 224), mean=None, std=None,
             batch_size: int = 32) -> dict:
    """Threshold logits at probability 0.5 and report metrics over `samples`.

    Returns {"n_images", "counts", "metrics"}; metric values are fractions
    in [0, 1] or None where undefined.
    """
    if not samples:
        raise ValueError("evaluate: empty split")
    if mean is None or std is None:
        from .data import IMAGENET_MEAN, IMAGENET_STD
        mean = IMAGENET_MEAN if mean is None else mean
        std = IMAGENET_STD if std is None else std
    images, masks = _preprocess_stack(samples, image_size, mean, std)
    return _eval_tensors(model, images, masks, batch_size)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # stream derived from (global seed, worker index, epoch); single worker
    return np.random.default_rng(np.random.SeedSequence([seed, 0, epoch]))


def train(model, train_samples, test_samples, cfg: TrainConfig, run_dir, *,
          config_snapshot: dict | None = None, image_size=(224, 224),
          max_steps: int | None = None, quiet: bool = True) -> RunManifest:
    """Run the full optimization protocol, writing artifacts under `run_dir`.

    Writes config.json and an initial manifest.json before touching model
    state, then best.ckpt / last.ckpt / log.txt as the run progresses.
    `max_steps` optionally caps total optimizer steps (smoke runs).
    Returns the final RunManifest.
    """
    cfg.validate()
    if not train_samples:
        raise ValueError("train: empty training split")
    if not test_samples:
        raise ValueError("train: empty test split")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    mean, std = compute_normalization(train_samples)
    snapshot = dict(config_snapshot or {})
    snapshot.setdefault("train", asdict(cfg))
    snapshot["normalization"] = {"mean": mean, "std": std}
    snapshot["image_size"] = list(image_size)
    (run_dir / "config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True)
    )
    manifest = RunManifest(config=snapshot)
    manifest.save(run_dir / "manifest.json")

    prior_determinism = torch.are_deterministic_algorithms_enabled()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    test_images, test_masks = _preprocess_stack(test_samples, image_size, mean, std)

    best_miou = -1.0
    best_epoch = None
    total_steps = 0
    t_start = time.time()
    log_path = run_dir / "log.txt"
    try:
        with log_path.open("w") as log:
            def emit(msg: str) -> None:
                log.write(msg + "\n")
                log.flush()
                if not quiet:
                    print(msg)

            emit(f"training: {len(train_samples)} train / {len(test_samples)} test "
                 f"samples, image_size={tuple(image_size)}")
            stop_reason = "epoch budget exhausted"
            for epoch in range(1, cfg.epochs + 1):
                lr = cosine_lr(epoch - 1, cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                rng = _epoch_rng(cfg.seed, epoch)
                order = rng.permutation(len(train_samples))
                model.train()
                epoch_losses = []
                for b_start in range(0, len(order), cfg.batch_size):
                    batch_idx = order[b_start:b_start + cfg.batch_size]
                    ims, mks = [], []
                    for idx in batch_idx:
                        s = train_samples[int(idx)]
                        aug_im, aug_mk = augment(s.image, s.mask, rng)
                        im_t, mk_t = preprocess(
                            type(s)(image=aug_im, mask=aug_mk, id=s.id),
                            size=image_size, mean=mean, std=std,
                        )
                        ims.append(im_t)
                        mks.append(mk_t)
                    x = torch.stack(ims)
                    y = torch.stack(mks)
                    logits = model(x)
                    loss = loss_bce_dice(logits, y)
                    if not torch.isfinite(loss):
                        raise NumericError(
                            f"non-finite loss at epoch {epoch} batch "
                            f"{b_start // cfg.batch_size}"
                        )
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    step_loss = float(loss.detach())
                    manifest.step_losses.append(step_loss)
                    epoch_losses.append(step_loss)
                    total_steps += 1
                    if max_steps is not None and total_steps >= max_steps:
                        break

                result = _eval_tensors(model, test_images, test_masks,
                                       cfg.batch_size)
                miou = result["metrics"]["mIoU"]
                row = {
                    "epoch": epoch,
                    "lr": lr,
                    "train_loss": float(np.mean(epoch_losses)),
                    "steps": total_steps,
                    "test_metrics": result["metrics"],
                }
                manifest.history.append(row)
                emit(f"epoch {epoch}: lr {lr:.3e} loss {row['train_loss']:.4f} "
                     f"test mIoU {miou if miou is None else round(miou, 4)}")

                if miou is not None and miou > best_miou:
                    best_miou = miou
                    best_epoch = epoch
                    save_checkpoint(
                        run_dir / "best.ckpt", model, snapshot,
                        epoch=epoch, best_metric=best_miou, optimizer=optimizer,
                    )
                    manifest.checkpoints["best"] = str(run_dir / "best.ckpt")
                manifest.best_epoch = best_epoch
                manifest.save(run_dir / "manifest.json")

                if max_steps is not None and total_steps >= max_steps:
                    stop_reason = f"step budget ({max_steps}) reached"
                    break
                if best_epoch is not None and epoch - best_epoch >= cfg.early_stop_patience:
                    stop_reason = (
                        f"early stop: no mIoU improvement for "
                        f"{cfg.early_stop_patience} epochs"
                    )
                    break

            save_checkpoint(
                run_dir / "last.ckpt", model, snapshot,
                epoch=manifest.history[-1]["epoch"] if manifest.history else 0,
                best_metric=None if best_epoch is None else best_miou,
                optimizer=optimizer,
            )
            manifest.checkpoints["last"] = str(run_dir / "last.ckpt")
            manifest.timings = {
                "total_seconds": round(time.time() - t_start, 3),
                "steps": total_steps,
            }
            manifest.save(run_dir / "manifest.json")
            emit(f"done: {stop_reason}; best epoch {best_epoch} "
                 f"(mIoU {None if best_epoch is None else round(best_miou, 4)})")
    finally:
        torch.use_deterministic_algorithms(prior_determinism)
    return manifest
