"""Checkpoints: a directory of BTSR tensors plus ``manifest.json``."""

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..numerics import btsr
from .network import DenoiserConfig

FORMAT = "blendiff-checkpoint"


def save_checkpoint(path, params, dcfg, step=0, ema=True, extra=None):
    """Write ``params`` (float32 on disk) and a manifest describing them."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    for name, value in sorted(params.items()):
        btsr.save(path / "tensors" / f"{name}.btsr", np.asarray(value))
    manifest = {
        "format": FORMAT,
        "version": 1,
        "denoiser": dcfg.to_dict(),
        "step": int(step),
        "ema": bool(ema),
        "tensors": {k: list(np.shape(v)) for k, v in sorted(params.items())},
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(path):
    """Return ``(params, DenoiserConfig, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint manifest in {path}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path} is not a checkpoint directory")
    params = {}
    for name, shape in manifest["tensors"].items():
        arr = btsr.load(path / "tensors" / f"{name}.btsr", rank=len(shape))
        if list(arr.shape) != list(shape):
            raise FormatError(f"tensor {name} has shape {arr.shape}, manifest says {shape}")
        params[name] = arr.astype(np.float64)
    return params, DenoiserConfig(**manifest["denoiser"]), manifest
