"""Versioned checkpoint archive: ``manifest.json`` plus raw parameter blobs.

Layout inside the zip::

    manifest.json          {"format": ..., "version": ..., "meta": {...}, "tensors": {...}}
    tensors/<name>.npy     one raw array per parameter/buffer
    blobs/<name>.bin       opaque byte blobs (optimizer state, rng state)

Writes go to a temporary sibling file and are renamed into place.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT = "latent-rescale-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def state_checksum(state: dict[str, torch.Tensor]) -> str:
    """sha256 over sorted names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict,
                 blobs: dict[str, bytes] | None = None) -> str:
    """Write an archive; returns the checksum of ``tensors``."""
    blobs = blobs or {}
    checksum = state_checksum(tensors)
    entries = {}
    buf = io.BytesIO()
    # fixed timestamps keep the archive bytes reproducible
    stamp = (2020, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().contiguous().numpy()
            b = io.BytesIO()
            np.save(b, arr, allow_pickle=False)
            entries[name] = {"dtype": str(arr.dtype), "shape": list(arr.shape)}
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.npy", stamp), b.getvalue())
        for name in sorted(blobs):
            zf.writestr(zipfile.ZipInfo(f"blobs/{name}.bin", stamp), blobs[name])
        manifest = {"format": FORMAT, "version": VERSION, "checksum": checksum,
                    "meta": meta, "tensors": entries, "blobs": sorted(blobs)}
        zf.writestr(zipfile.ZipInfo("manifest.json", stamp),
                    json.dumps(manifest, indent=2, sort_keys=True))
    _atomic_write_bytes(Path(path), buf.getvalue())
    return checksum


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict, dict[str, bytes]]:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} archive")
        if manifest.get("version", 0) > VERSION:
            raise CheckpointError(f"{path}: archive version {manifest['version']} is newer than {VERSION}")
        tensors = {}
        for name in manifest["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            tensors[name] = torch.from_numpy(arr.copy())
        blobs = {name: zf.read(f"blobs/{name}.bin") for name in manifest.get("blobs", [])}
    if state_checksum(tensors) != manifest["checksum"]:
        raise CheckpointError(f"{path}: tensor checksum mismatch")
    meta = dict(manifest["meta"])
    meta["checksum"] = manifest["checksum"]
    return tensors, meta, blobs


def torch_blob(obj) -> bytes:
    b = io.BytesIO()
    torch.save(obj, b)
    return b.getvalue()


def torch_unblob(data: bytes):
    return torch.load(io.BytesIO(data), weights_only=False)
