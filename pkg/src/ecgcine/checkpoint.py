"""Checkpoints: a named-array archive of tensors next to a JSON sidecar.

``<stem>.npz`` holds every state-dict entry as a numpy array; ``<stem>.json``
holds the format version, model kind, config snapshot and training history.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointVersionError, DependencyError

FORMAT_VERSION = 1


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".npz", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".npz"), stem.with_suffix(".json")


def save_checkpoint(stem: str | Path, module: torch.nn.Module, kind: str,
                    config: dict[str, Any], history: dict[str, Any] | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> Path:
    npz, meta = _paths(stem)
    npz.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    np.savez(npz, **arrays)
    meta.write_text(json.dumps({
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "history": history or {},
    }, indent=1))
    return npz


def checkpoint_exists(stem: str | Path) -> bool:
    return all(p.exists() for p in _paths(stem))


def load_checkpoint(stem: str | Path, kind: str | None = None):
    """Return ``(state_dict, meta, extra_arrays)``."""
    npz, meta_path = _paths(stem)
    if not (npz.exists() and meta_path.exists()):
        raise DependencyError(f"missing checkpoint: {npz}")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{meta_path} has format version {version}, this build reads version {FORMAT_VERSION}")
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointVersionError(f"{meta_path} holds a {meta.get('kind')!r} model, expected {kind!r}")
    state, extra = {}, {}
    with np.load(npz) as z:
        for k in z.files:
            if k.startswith("extra/"):
                extra[k[len("extra/"):]] = z[k]
            else:
                state[k] = torch.from_numpy(z[k].copy())
    return state, meta, extra
