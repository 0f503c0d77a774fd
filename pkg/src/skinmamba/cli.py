"""Command-line entry points: train, evaluate, predict, ablate, inspect.

Configs are JSON documents with three sections (network, train, data) plus
an optional run_name.  Any leaf can be overridden from the command line
with repeatable `--set dotted.key=value` flags; a bare key is accepted when
it is unambiguous.  Every run directory gets a lock file, a config
snapshot (with the applied overrides echoed), a run manifest, checkpoints,
and a log.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .blocks import MIXER_VARIANTS, BlockConfig
from .checkpoint import load_checkpoint, read_checkpoint_meta
from .data import (
    SplitManifest,
    compute_normalization,
    load_dataset,
    make_synthetic_samples,
    split,
)
from .exceptions import CheckpointError, ConfigError, PairingError, SkinMambaError
from .metrics import ConfusionCounts, format_report
from .network import NetworkConfig, build_model, parameter_count, stage_shape_ledger
from .training import RunManifest, TrainConfig, evaluate, train

__all__ = ["main", "default_config", "apply_overrides", "build_network_config"]

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

# block-toggle grid (Ver1..Ver4) followed by the two mixer swaps
ABLATION_CELLS = (
    ("Ver1", {"use_srssb": False, "use_fbgm": False, "variant": "VSSB"}),
    ("Ver2", {"use_srssb": True, "use_fbgm": False, "variant": "VSSB"}),
    ("Ver3", {"use_srssb": False, "use_fbgm": True, "variant": "VSSB"}),
    ("Ver4", {"use_srssb": True, "use_fbgm": True, "variant": "VSSB"}),
    ("Conv3x3", {"use_srssb": True, "use_fbgm": True, "variant": "CONV3x3"}),
    ("SelfAttention", {"use_srssb": True, "use_fbgm": True,
                       "variant": "SELF_ATTENTION"}),
)


def default_config() -> dict:
    """The full config tree with every overridable leaf at its default."""
    return {
        "run_name": None,
        "network": {
            "base_channels": 16,
            "num_stages": 5,
            "num_classes": 1,
            "input_channels": 3,
            "input_size": [224, 224],
            "skip_mode": "CONCAT",
            "block": {
                "ssm_state_dim": 16,
                "smffl_hidden_ratio": 0.5,
                "variant": "VSSB",
                "use_srssb": True,
                "use_fbgm": True,
            },
        },
        "train": {k: v for k, v in asdict(TrainConfig()).items()},
        "data": {
            "root": None,
            "dataset_name": "dataset",
            "ratio": 0.7,
            "synthetic": None,
        },
    }


def _leaf_paths(tree: dict, prefix: str = "") -> list[str]:
    paths = []
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            paths.extend(_leaf_paths(value, dotted + "."))
        else:
            paths.append(dotted)
    return paths


def _merge_config(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(
                f"unknown config key {dotted!r}; valid keys: "
                f"{', '.join(_leaf_paths(default_config()))}"
            )
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge_config(base[key], value, dotted + ".")
        else:
            base[key] = value


def load_config(path: str | None) -> dict:
    """Read a config file and merge it over the defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config file {p} must contain a JSON object")
    # "synthetic" defaults to None, so a dict value replaces it wholesale
    _merge_config(cfg, user)
    return cfg


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, dict)) or current is None:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def apply_overrides(cfg: dict, assignments: list[str]) -> list[str]:
    """Apply `key=value` strings to the config tree in place.

    Keys may be dotted paths or unique bare leaf names; values are coerced
    to the type of the value they replace.  Returns the raw assignment
    strings (echoed into the persisted snapshot for auditability).
    """
    valid = _leaf_paths(default_config())
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key = key.strip()
        if key not in valid:
            matches = [p for p in valid if p.split(".")[-1] == key]
            if len(matches) == 1:
                key = matches[0]
            elif len(matches) > 1:
                raise ConfigError(
                    f"override key {key!r} is ambiguous: {', '.join(matches)}"
                )
            else:
                raise ConfigError(
                    f"unknown override key {key!r}; valid keys: {', '.join(valid)}"
                )
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
        node[parts[-1]] = _coerce(raw.strip(), node.get(parts[-1]))
    return list(assignments)


def build_network_config(section: dict) -> NetworkConfig:
    block = section.get("block", {})
    known_block = {f for f in BlockConfig.__dataclass_fields__} - {"channels"}
    unknown = set(block) - known_block
    if unknown:
        raise ConfigError(
            f"unknown block keys {sorted(unknown)}; valid: {sorted(known_block)}"
        )
    block_cfg = BlockConfig(**{k: block[k] for k in block})
    known_net = set(NetworkConfig.__dataclass_fields__) - {"block"}
    body = {k: v for k, v in section.items() if k != "block"}
    unknown = set(body) - known_net
    if unknown:
        raise ConfigError(
            f"unknown network keys {sorted(unknown)}; valid: {sorted(known_net)}"
        )
    if "input_size" in body:
        body["input_size"] = tuple(body["input_size"])
    cfg = NetworkConfig(block=block_cfg, **body)
    cfg.validate()
    return cfg


def build_train_config(section: dict) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(
            f"unknown train keys {sorted(unknown)}; valid: {sorted(known)}"
        )
    cfg = TrainConfig(**section)
    cfg.validate()
    return cfg


def _load_samples(data_section: dict):
    """Materialize the sample list from a data section (files or synthetic)."""
    root = data_section.get("root")
    if root is not None:
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root does not exist: {root}")
        return load_dataset(root)
    synth = data_section.get("synthetic")
    if synth:
        return make_synthetic_samples(
            count=int(synth.get("count", 8)),
            size=int(synth.get("image_size", 64)),
            seed=int(synth.get("seed", 0)),
        )
    raise ConfigError(
        "data section needs either a dataset root (data.root) or a "
        "synthetic block (data.synthetic)"
    )


@contextmanager
def _run_dir_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"run directory {run_dir} is locked by another process "
            f"(remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _resolve_run_dir(args, cfg: dict, suffix: str | None = None) -> Path:
    if args.run_dir:
        base = Path(args.run_dir)
    else:
        name = cfg.get("run_name") or (
            Path(args.config).stem if args.config else "run"
        )
        base = Path("runs") / name
    return base / suffix if suffix else base


def _apply_shorthand(cfg: dict, args) -> list[str]:
    extra = []
    if args.seed is not None:
        extra.append(f"train.seed={args.seed}")
    if args.epochs is not None:
        extra.append(f"train.epochs={args.epochs}")
    if args.deterministic:
        extra.append("train.deterministic=true")
    return apply_overrides(cfg, extra) if extra else []


def _split_samples(samples, data_section: dict, seed: int):
    manifest = split(
        samples,
        ratio=float(data_section.get("ratio", 0.7)),
        seed=seed,
        dataset_name=data_section.get("dataset_name", "dataset"),
    )
    by_id = {s.id: s for s in samples}
    train_s = [by_id[i] for i in manifest.train_ids]
    test_s = [by_id[i] for i in manifest.test_ids]
    return manifest, train_s, test_s


def _train_once(cfg: dict, run_dir: Path, overrides: list[str]) -> RunManifest:
    net_cfg = build_network_config(cfg["network"])
    train_cfg = build_train_config(cfg["train"])
    samples = _load_samples(cfg["data"])
    manifest, train_s, test_s = _split_samples(samples, cfg["data"], train_cfg.seed)
    mean, std = compute_normalization(train_s)
    manifest.normalization = {"mean": mean, "std": std}
    with _run_dir_lock(run_dir):
        manifest.save(run_dir / "split.txt")
        snapshot = copy.deepcopy(cfg)
        snapshot["_overrides"] = overrides
        model = build_model(net_cfg, seed=train_cfg.seed)
        return train(
            model, train_s, test_s, train_cfg, run_dir,
            config_snapshot=snapshot,
            image_size=tuple(net_cfg.input_size),
        )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    overrides = apply_overrides(cfg, args.set or [])
    overrides += _apply_shorthand(cfg, args)
    run_dir = _resolve_run_dir(args, cfg)
    run_manifest = _train_once(cfg, run_dir, overrides)
    best = run_manifest.best_epoch
    print(f"run complete: {run_dir} (best epoch: {best})")
    return EXIT_OK


def _model_from_checkpoint(path):
    meta = read_checkpoint_meta(path)
    net_section = meta["config"].get("network")
    if net_section is None:
        raise CheckpointError(f"checkpoint {path} lacks a network config section")
    net_cfg = build_network_config(net_section)
    model = build_model(net_cfg, seed=0)
    load_checkpoint(path, model)
    model.eval()
    return model, net_cfg, meta


def cmd_evaluate(args) -> int:
    model, net_cfg, meta = _model_from_checkpoint(args.checkpoint)
    cfg = load_config(args.config)
    apply_overrides(cfg, args.set or [])
    samples = _load_samples(cfg["data"])
    seed = int(cfg["train"]["seed"])
    _, train_s, test_s = _split_samples(samples, cfg["data"], seed)
    chosen = train_s if args.split == "train" else test_s
    norm = meta["config"].get("normalization") or {}
    result = evaluate(
        model, chosen,
        image_size=tuple(net_cfg.input_size),
        mean=norm.get("mean"), std=norm.get("std"),
        batch_size=int(cfg["train"]["batch_size"]),
    )
    counts = ConfusionCounts(**{k.lower(): v for k, v in result["counts"].items()})
    name = cfg["data"].get("dataset_name", "dataset")
    report = format_report({name: counts})
    if args.out:
        Path(args.out).write_text(report + "\n")
        print(f"report written to {args.out}")
    else:
        print(report)
    return EXIT_OK


def cmd_predict(args) -> int:
    from PIL import Image

    model, net_cfg, meta = _model_from_checkpoint(args.checkpoint)
    image_dir = Path(args.images)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory does not exist: {image_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    norm = meta["config"].get("normalization") or {}
    from .data import IMAGENET_MEAN, IMAGENET_STD
    mean = np.asarray(norm.get("mean") or IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(norm.get("std") or IMAGENET_STD, dtype=np.float32)
    h, w = net_cfg.input_size
    failures = 0
    produced = 0
    import torch

    paths = sorted(
        p for p in image_dir.iterdir()
        if p.suffix.lower() in (".jpg", ".jpeg", ".png")
    )
    if not paths:
        raise FileNotFoundError(f"no images under {image_dir}")
    for p in paths:
        try:
            with Image.open(p) as im:
                rgb = im.convert("RGB")
        except OSError as exc:
            print(f"warning: skipping unreadable image {p}: {exc}", file=sys.stderr)
            failures += 1
            continue
        orig_w, orig_h = rgb.size
        arr = np.asarray(rgb.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
        arr = (arr - mean) / std
        x = torch.from_numpy(arr.transpose(2, 0, 1)[None].copy())
        with torch.no_grad():
            logits = model(x)
        mask = (logits[0, 0] > 0).numpy().astype(np.uint8) * 255
        mask_im = Image.fromarray(mask).resize((orig_w, orig_h), Image.NEAREST)
        mask_im.save(out_dir / f"{p.stem}_mask.png")
        overlay = np.asarray(rgb, dtype=np.float32)
        sel = np.asarray(mask_im) > 0
        overlay[sel] = 0.6 * overlay[sel] + 0.4 * np.array([255.0, 0.0, 0.0])
        Image.fromarray(overlay.astype(np.uint8)).save(
            out_dir / f"{p.stem}_overlay.png"
        )
        produced += 1
    print(f"predict: {produced} masks written to {out_dir}, {failures} skipped")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_ablate(args) -> int:
    base_cfg = load_config(args.config)
    overrides = apply_overrides(base_cfg, args.set or [])
    overrides += _apply_shorthand(base_cfg, args)
    root = _resolve_run_dir(args, base_cfg)
    rows = []
    failed = 0
    for name, toggles in ABLATION_CELLS:
        cfg = copy.deepcopy(base_cfg)
        cfg["network"]["block"].update(toggles)
        cell_dir = root / name
        try:
            manifest = _train_once(cfg, cell_dir, overrides + [
                f"network.block.{k}={v}" for k, v in toggles.items()
            ])
            best = manifest.best_epoch
            metrics = None
            if best is not None:
                metrics = manifest.history[best - 1]["test_metrics"]
            rows.append({"cell": name, "toggles": toggles,
                         "best_epoch": best, "metrics": metrics})
        except (SkinMambaError, OSError, ValueError) as exc:
            failed += 1
            rows.append({"cell": name, "toggles": toggles, "error": str(exc)})
            print(f"cell {name} failed: {exc}", file=sys.stderr)
    report = {"cells": rows}
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True)
    )
    print(f"{'cell':<14} {'mIoU':>8} {'DSC':>8}  best_epoch")
    for row in rows:
        if "error" in row:
            print(f"{row['cell']:<14} {'ERROR':>8}  {row['error'][:50]}")
            continue
        m = row["metrics"] or {}
        miou = m.get("mIoU")
        dsc = m.get("DSC")
        print(f"{row['cell']:<14} "
              f"{'n/a' if miou is None else f'{100 * miou:8.2f}'} "
              f"{'n/a' if dsc is None else f'{100 * dsc:8.2f}'}  "
              f"{row['best_epoch']}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        meta = read_checkpoint_meta(args.checkpoint)
        net_cfg = build_network_config(meta["config"]["network"])
        model = build_model(net_cfg, seed=0)
        info = {
            "checkpoint": str(args.checkpoint),
            "state": meta["state"],
            "parameter_count": parameter_count(model),
            "stage_shapes": stage_shape_ledger(net_cfg),
            "config": meta["config"],
        }
    else:
        cfg = load_config(args.config)
        apply_overrides(cfg, args.set or [])
        net_cfg = build_network_config(cfg["network"])
        build_train_config(cfg["train"])
        model = build_model(net_cfg, seed=int(cfg["train"]["seed"]))
        info = {
            "parameter_count": parameter_count(model),
            "stage_shapes": stage_shape_ledger(net_cfg),
            "config": cfg,
        }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config leaf (repeatable)")
    parser.add_argument("--run-dir", help="run directory (default runs/<name>)")
    parser.add_argument("--seed", type=int, help="shorthand for train.seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="shorthand for train.deterministic=true")
    parser.add_argument("--epochs", type=int, help="shorthand for train.epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skinmamba",
        description="Train and run the lesion segmentation network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    p_eval.add_argument("--out", help="write the JSON report here")
    p_eval.set_defaults(func=cmd_evaluate)

    p_pred = sub.add_parser("predict", help="segment a directory of images")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--images", required=True, help="input image directory")
    p_pred.add_argument("--out", required=True, help="output directory")
    p_pred.set_defaults(func=cmd_predict)

    p_abl = sub.add_parser("ablate", help="run the six-cell ablation sweep")
    _add_common(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_ins = sub.add_parser("inspect", help="print config, shapes, parameter count")
    _add_common(p_ins)
    p_ins.add_argument("--checkpoint", help="inspect a checkpoint archive instead")
    p_ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, PairingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SkinMambaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
