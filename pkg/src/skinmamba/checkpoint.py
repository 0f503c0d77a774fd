"""Checkpoint archive format.

A checkpoint is a single zip archive::

    config.json          canonical JSON config snapshot
    state.json           {"epoch", "best_metric", "format", "version"}
    params/<name>.npy    one little-endian float32 array per state tensor
    optim/<name>.<k>.npy optimizer moments (exp_avg, exp_avg_sq, step)

Array entries are keyed by the dotted module path from ``state_dict`` and
include buffers (BatchNorm statistics) alongside learnable parameters.
Entry order and timestamps are fixed so identical states produce
byte-identical archives.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointError

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_meta",
]

_FORMAT = "skinmamba-checkpoint"
_VERSION = 1
# fixed timestamp: zip stores no epoch-1970 times, 1980-01-01 is the floor
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _array_bytes(tensor: torch.Tensor) -> bytes:
    arr = tensor.detach().cpu().numpy().astype("<f4")
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def save_checkpoint(path, model: torch.nn.Module, config: dict, *,
                    epoch: int, best_metric: float | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    """Write model (and optionally optimizer) state to `path` atomically.

    `config` is an arbitrary JSON-serializable snapshot stored verbatim;
    loading uses it to rebuild a compatible model.
    """
    path = Path(path)
    state = {
        "format": _FORMAT,
        "version": _VERSION,
        "epoch": int(epoch),
        "best_metric": None if best_metric is None else float(best_metric),
    }
    entries: list[tuple[str, bytes]] = [
        ("config.json", _canonical_json(config).encode()),
        ("state.json", _canonical_json(state).encode()),
    ]
    sd = model.state_dict()
    for name in sorted(sd):
        entries.append((f"params/{name}.npy", _array_bytes(sd[name])))
    if optimizer is not None:
        entries.extend(_optimizer_entries(model, optimizer))
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with zipfile.ZipFile(tmp, "w") as zf:
            for name, payload in entries:
                _write_entry(zf, name, payload)
        tmp.replace(path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


def _optimizer_entries(model, optimizer) -> list[tuple[str, bytes]]:
    name_of = {p: n for n, p in model.named_parameters()}
    entries = []
    for param, st in optimizer.state.items():
        name = name_of.get(param)
        if name is None:
            continue
        for key in sorted(st):
            val = st[key]
            if not torch.is_tensor(val):
                val = torch.tensor(float(val))
            entries.append((f"optim/{name}.{key}.npy", _array_bytes(val)))
    entries.sort()
    return entries


def _load_array(zf: zipfile.ZipFile, entry: str) -> np.ndarray:
    with zf.open(entry) as fh:
        return np.load(io.BytesIO(fh.read()))


def read_checkpoint_meta(path) -> dict:
    """Return {"config", "state", "param_names", "optim_names"} without
    loading any arrays into a model."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "config.json" not in names or "state.json" not in names:
                raise CheckpointError(f"malformed checkpoint (missing metadata): {path}")
            config = json.loads(zf.read("config.json"))
            state = json.loads(zf.read("state.json"))
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"not a checkpoint archive: {path}") from exc
    if state.get("format") != _FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format in {path}")
    params = sorted(
        n[len("params/"):-len(".npy")] for n in names
        if n.startswith("params/") and n.endswith(".npy")
    )
    optim = sorted(
        n[len("optim/"):-len(".npy")] for n in names
        if n.startswith("optim/") and n.endswith(".npy")
    )
    return {"config": config, "state": state,
            "param_names": params, "optim_names": optim}


def load_checkpoint(path, model: torch.nn.Module | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Restore state from a checkpoint archive.

    When `model` is given, every archive array must match a state tensor by
    name and shape (and vice versa); values are cast back to each target's
    dtype.  When `optimizer` is given as well, its moments are restored.
    Returns the metadata dict of :func:`read_checkpoint_meta`.
    """
    meta = read_checkpoint_meta(path)
    if model is None:
        return meta
    with zipfile.ZipFile(path) as zf:
        sd = model.state_dict()
        archive = set(meta["param_names"])
        expected = set(sd)
        if archive != expected:
            missing = sorted(expected - archive)[:5]
            unexpected = sorted(archive - expected)[:5]
            raise CheckpointError(
                f"checkpoint/model mismatch: missing {missing}, unexpected {unexpected}"
            )
        with torch.no_grad():
            for name in meta["param_names"]:
                arr = _load_array(zf, f"params/{name}.npy")
                target = sd[name]
                if tuple(arr.shape) != tuple(target.shape):
                    raise CheckpointError(
                        f"shape mismatch for {name}: archive {arr.shape} "
                        f"vs model {tuple(target.shape)}"
                    )
                target.copy_(torch.from_numpy(arr).to(target.dtype))
        if optimizer is not None and meta["optim_names"]:
            _restore_optimizer(zf, model, optimizer, meta["optim_names"])
    return meta


def _restore_optimizer(zf, model, optimizer, optim_names) -> None:
    params = dict(model.named_parameters())
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for entry in optim_names:
        name, _, key = entry.rpartition(".")
        grouped.setdefault(name, {})[key] = _load_array(zf, f"optim/{entry}.npy")
    for name, moments in grouped.items():
        param = params.get(name)
        if param is None:
            raise CheckpointError(f"optimizer state for unknown parameter {name}")
        st = optimizer.state[param]
        for key, arr in moments.items():
            st[key] = torch.from_numpy(arr)
