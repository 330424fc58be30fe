"""Checkpoint files: a JSON manifest plus one contiguous little-endian payload.

Layout of a checkpoint directory::

    manifest.json   format version, configs, seed, step, schedule, adam
                    hyper-parameters, and a name -> (section, shape, offset)
                    table
    payload.bin     parameters, then Adam first and second moments
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "FORMAT"]

FORMAT = "jedssl-checkpoint/1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    step: int = 0
    seed: int = 0
    adam: AdamState | None = None
    schedule: dict | None = None
    train_config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: dict[str, Tensor], **kw) -> "Checkpoint":
        return cls(params={n: t.data.copy() for n, t in params.items()}, **kw)

    @property
    def dtype(self) -> str:
        kinds = {np.asarray(v).dtype.name for v in self.params.values()}
        return "float64" if "float64" in kinds else "float32"


def _manifest(ckpt: Checkpoint) -> tuple[dict, list[np.ndarray]]:
    dtype = ckpt.dtype
    table, chunks, offset = [], [], 0

    def put(section, name, arr):
        nonlocal offset
        arr = np.asarray(arr, dtype=_DTYPES[dtype])
        table.append({"section": section, "name": name, "shape": list(arr.shape),
                      "offset": offset, "count": int(arr.size)})
        chunks.append(arr.reshape(-1))
        offset += arr.size

    for name in sorted(ckpt.params):
        put("param", name, ckpt.params[name])
    adam = None
    if ckpt.adam is not None:
        adam = {"beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps, "step": ckpt.adam.step}
        for name in sorted(ckpt.adam.m):
            put("adam_m", name, ckpt.adam.m[name])
            put("adam_v", name, ckpt.adam.v[name])
    manifest = {
        "format": FORMAT,
        "dtype": dtype,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "schedule": ckpt.schedule,
        "adam": adam,
        "meta": ckpt.meta,
        "tensors": table,
    }
    return manifest, chunks


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    """Write ``ckpt`` to directory ``path`` (replaced atomically if it exists)."""
    path = Path(path)
    manifest, chunks = _manifest(ckpt)
    payload = (np.concatenate(chunks) if chunks else np.zeros(0, dtype=_DTYPES[manifest["dtype"]])).tobytes()
    manifest["payload_bytes"] = len(payload)
    manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        (tmp / "payload.bin").write_bytes(payload)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.rename(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: format {manifest.get('format')!r} != expected {FORMAT!r}")
    payload = (path / "payload.bin").read_bytes()
    diffs = []
    if len(payload) != manifest["payload_bytes"]:
        diffs.append(f"payload_bytes: manifest {manifest['payload_bytes']} != file {len(payload)}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        diffs.append(f"payload_sha256: manifest {manifest['payload_sha256']} != file {digest}")
    if diffs:
        raise CheckpointError(f"{path}: corrupted checkpoint; " + "; ".join(diffs))
    flat = np.frombuffer(payload, dtype=_DTYPES[manifest["dtype"]])
    np_dtype = np.dtype(manifest["dtype"])
    sections: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["tensors"]:
        arr = flat[e["offset"] : e["offset"] + e["count"]].astype(np_dtype).reshape(e["shape"])
        sections[e["section"]][e["name"]] = arr
    adam = None
    if manifest["adam"] is not None:
        a = manifest["adam"]
        adam = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         m=sections["adam_m"], v=sections["adam_v"])
    return Checkpoint(params=sections["param"], model_config=manifest["model_config"], step=manifest["step"],
                      seed=manifest["seed"], adam=adam, schedule=manifest["schedule"],
                      train_config=manifest["train_config"], meta=manifest["meta"])
