"""Checkpoint container: one .npz holding named arrays plus a JSON manifest.

Arrays are stored little-endian; the manifest lists every array name and
shape alongside the seed and config hash, so a checkpoint is self-describing.
Restoring a checkpoint and continuing reproduces the uninterrupted
trajectory exactly: all randomness is derived from (seed, epoch), so no
generator internals need to survive the round trip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Model
from .optim import Adam

FORMAT_VERSION = 1


def _little_endian(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.byteorder == ">":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(path, model: Model, optimizer: Adam | None, epoch: int,
                    config, extra: dict | None = None) -> None:
    arrays = dict(model.state_dict())
    if optimizer is not None:
        arrays.update({f"adam/{k}": v for k, v in optimizer.state().items()})
    arrays = {k: _little_endian(np.asarray(v)) for k, v in arrays.items()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "epoch": epoch,
        "n_entities": model.n_entities,
        "n_relations": model.n_relations,
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, manifest=np.asarray(json.dumps(manifest)), **arrays)


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    def config(self):
        from .training import ModelConfig  # avoid import cycle

        return ModelConfig.from_dict(self.manifest["config"])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as payload:
        arrays = {k: payload[k] for k in payload.files if k != "manifest"}
        manifest = json.loads(str(payload["manifest"]))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {manifest.get('format_version')}"
        )
    return Checkpoint(manifest=manifest, arrays=arrays)


def restore_model(ckpt: Checkpoint) -> tuple[Model, Adam]:
    """Rebuild the model and optimizer exactly as they were saved."""
    config = ckpt.config()
    model = Model(
        config, ckpt.manifest["n_entities"], ckpt.manifest["n_relations"]
    )
    model.load_state_dict(
        {k: v for k, v in ckpt.arrays.items() if not k.startswith("adam/")}
    )
    optimizer = Adam(model.named_parameters(), lr=config.lr)
    adam_state = {
        k[len("adam/"):]: v for k, v in ckpt.arrays.items() if k.startswith("adam/")
    }
    if adam_state:
        optimizer.load_state(adam_state)
    return model, optimizer
