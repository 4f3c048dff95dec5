"""Checkpoint directories: ``manifest.json`` plus one CSIT file per tensor."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csit import load_csi_tensor, save_csi_tensor
from .data import Standardizer
from .errors import FormatError, IntegrityError
from .models import Autoencoder, Localizer, ModelSpec, build_autoencoder, build_localizer

FORMAT = "csiloc-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    manifest: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.manifest["model"])

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("aux.")}


def make_checkpoint(model: Autoencoder | Localizer, *, epoch: int, val_loss: float,
                    config_hash: str, state: dict | None = None, extra: dict | None = None) -> Checkpoint:
    """Snapshot ``model`` (or a previously captured ``state``) with its scalers."""
    tensors = dict(state if state is not None else model.state_dict())
    scalers = {"feature": getattr(model, "feature_scaler", None),
               "target": getattr(model, "target_scaler", None)}
    scaler_flags = {}
    for role, sc in scalers.items():
        if sc is not None and sc.enabled:
            tensors[f"aux.{role}_mean"] = np.asarray(sc.mean)
            tensors[f"aux.{role}_std"] = np.asarray(sc.std)
        scaler_flags[role] = bool(sc is not None and sc.enabled)
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": "autoencoder" if isinstance(model, Autoencoder) else "localizer",
        "model": model.spec.to_dict(),
        "encoder_frozen": bool(getattr(model, "encoder_frozen", False)),
        "standardized": scaler_flags,
        "epoch": int(epoch),
        "val_loss": float(val_loss),
        "config_hash": config_hash,
    }
    manifest.update(extra or {})
    return Checkpoint(tensors, manifest)


def _file_name(name: str) -> str:
    return name + ".csit"


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        save_csi_tensor(path / _file_name(name), arr)
        entries.append({"name": name, "file": _file_name(name), "shape": list(arr.shape),
                        "dtype": str(arr.dtype)})
    keep = {e["file"] for e in entries}
    for stale in path.glob("*.csit"):
        if stale.name not in keep:
            stale.unlink()
    manifest = dict(ckpt.manifest, tensors=entries)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise IntegrityError(f"{path}: no {MANIFEST} found")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{mpath}: invalid JSON ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise IntegrityError(f"{mpath}: not a {FORMAT} manifest")
    tensors = {}
    for entry in manifest.get("tensors", []):
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise IntegrityError(f"{path}: tensor file {entry['file']} is missing")
        try:
            arr = load_csi_tensor(fpath)
        except FormatError as exc:
            raise IntegrityError(f"{fpath}: {exc}") from exc
        if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
            raise IntegrityError(
                f"{fpath}: manifest says {entry['shape']} {entry['dtype']}, "
                f"file holds {list(arr.shape)} {arr.dtype}"
            )
        tensors[entry["name"]] = arr
    manifest = {k: v for k, v in manifest.items() if k != "tensors"}
    return Checkpoint(tensors, manifest)


def _scaler(ckpt: Checkpoint, role: str) -> Standardizer | None:
    if not ckpt.manifest.get("standardized", {}).get(role):
        return None
    try:
        return Standardizer(ckpt.tensors[f"aux.{role}_mean"], ckpt.tensors[f"aux.{role}_std"])
    except KeyError:
        raise IntegrityError(f"checkpoint declares a {role} standardizer but its tensors are missing") from None


def model_from_checkpoint(ckpt: Checkpoint, encoder_frozen: bool | None = None):
    """Rebuild the autoencoder or localizer stored in ``ckpt``."""
    spec = ckpt.spec
    params = ckpt.parameters()
    dtype = next(iter(params.values())).dtype if params else np.float32
    if ckpt.kind == "autoencoder":
        model = build_autoencoder(spec, dtype=dtype)
    elif ckpt.kind == "localizer":
        frozen = ckpt.manifest.get("encoder_frozen", True) if encoder_frozen is None else encoder_frozen
        model = build_localizer(spec, encoder_frozen=frozen, dtype=dtype)
    else:
        raise IntegrityError(f"unknown checkpoint kind {ckpt.kind!r}")
    model.load_state_dict(params)
    model.feature_scaler = _scaler(ckpt, "feature")
    model.target_scaler = _scaler(ckpt, "target")
    return model
