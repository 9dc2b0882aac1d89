"""Checkpoint and flow-dump file formats.

A checkpoint is a single ``.npz`` archive of little-endian float32 weight
arrays plus a JSON manifest (array names/shapes, layer specs, model config,
calibration, seed) so the exact model can be rebuilt from the file alone.
"""

import io as _io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


def save_checkpoint(path, model, extra_meta=None):
    from .pipeline import model_manifest   # deferred: avoids circular import
    arrays = {name: p.detach().cpu().numpy().astype("<f4")
              for name, p in model.state_dict().items()}
    manifest = model_manifest(model)
    manifest["arrays"] = {name: list(a.shape) for name, a in arrays.items()}
    if extra_meta:
        manifest["extra"] = extra_meta
    # write through a file handle so numpy keeps the exact filename
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.frombuffer(
            json.dumps(manifest).encode(), dtype=np.uint8), **arrays)
    return Path(path)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, manifest)."""
    from .pipeline import model_from_manifest
    try:
        data = np.load(path)
        manifest = json.loads(bytes(data["__manifest__"]).decode())
    except (OSError, KeyError, json.JSONDecodeError, ValueError,
            zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    model = model_from_manifest(manifest)
    state = {}
    for name, shape in manifest["arrays"].items():
        if name not in data:
            raise CheckpointError(f"checkpoint missing array {name!r}")
        arr = data[name]
        if list(arr.shape) != shape:
            raise CheckpointError(
                f"array {name!r} has shape {list(arr.shape)}, manifest says {shape}")
        state[name] = torch.from_numpy(arr.copy())
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match model: {exc}") from exc
    return model, manifest


def write_flow_dump(path, flow, view_pair, scale_index=0):
    """Raw little-endian float32 (2, H, W) flow plus a JSON sidecar."""
    path = Path(path)
    fl = np.asarray(flow.detach().cpu().numpy() if torch.is_tensor(flow) else flow,
                    dtype="<f4")
    fl.tofile(path)
    sidecar = {"shape": list(fl.shape), "view_pair": list(view_pair),
               "scale_index": scale_index, "dtype": "<f4"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_flow_dump(path):
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    flow = np.fromfile(path, dtype="<f4").reshape(sidecar["shape"])
    return flow, sidecar
