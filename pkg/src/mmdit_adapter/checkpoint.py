"""Checkpoints: a JSON manifest plus one concatenated little-endian blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .fileio import atomic_write_bytes, atomic_write_text
from .mmdit import MMDiT, ModelConfig

FORMAT = "mmdit-adapter-checkpoint"
VERSION = "1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: MMDiT, optimizer=None, path=None, meta: dict | None = None) -> Path:
    path = Path(path)
    tensors = [(name, p.data) for name, p in model.params.items()]
    if optimizer is not None:
        tensors += [(f"optim.m.{k}", v) for k, v in optimizer.m.items()]
        tensors += [(f"optim.v.{k}", v) for k, v in optimizer.v.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        dtype = np.dtype(arr.dtype).name
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = dict(meta or {})
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "training": {
            "step": meta.pop("step", 0),
            "stage": meta.pop("stage", 0),
            "optimizer_moments": optimizer is not None,
            "optimizer_step": optimizer.t if optimizer is not None else 0,
        },
        "meta": meta,
        "blob": "tensors.bin",
        "tensors": entries,
    }
    path.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path / "tensors.bin", b"".join(chunks))
    atomic_write_text(path / "manifest.json", json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint manifest {mpath}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: not a checkpoint manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{mpath}: checkpoint version {manifest.get('version')!r}, expected {VERSION!r}")
    return manifest


def _read_tensors(path) -> tuple[dict, dict]:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = read_manifest(path)
    blob = (root / manifest.get("blob", "tensors.bin")).read_bytes()
    out, spans = {}, []
    for e in manifest["tensors"]:
        name, start, nbytes = e["name"], int(e["offset"]), int(e["nbytes"])
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {e['dtype']!r}")
        shape = tuple(int(s) for s in e["shape"])
        if nbytes != int(np.prod(shape)) * np.dtype(dtype).itemsize:
            raise CheckpointError(f"tensor {name!r}: byte count {nbytes} does not match shape {shape}")
        if start < 0 or start + nbytes > len(blob):
            raise CheckpointError(
                f"tensor {name!r} lies outside the blob (needs bytes {start}..{start + nbytes}, "
                f"blob has {len(blob)})")
        if name in out:
            raise CheckpointError(f"tensor {name!r} listed twice")
        spans.append((start, start + nbytes, name))
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=start)
        out[name] = arr.astype(np.dtype(dtype).newbyteorder("=")).reshape(shape)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"tensors {an!r} and {bn!r} overlap in the blob")
    return manifest, out


def load_into(model: MMDiT, path) -> dict:
    """Copy checkpoint tensors into ``model``; returns the manifest."""
    manifest, tensors = _read_tensors(path)
    params = model.params
    for name in tensors:
        if name not in params and not name.startswith("optim."):
            raise CheckpointError(f"checkpoint tensor {name!r} is unknown to the model")
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks model tensor {name!r}")
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.shape}")
        p.data = np.asarray(arr, dtype=p.dtype, order="C")
    manifest["_optimizer"] = {
        "m": {k[len("optim.m."):]: v for k, v in tensors.items() if k.startswith("optim.m.")},
        "v": {k[len("optim.v."):]: v for k, v in tensors.items() if k.startswith("optim.v.")},
        "t": manifest["training"].get("optimizer_step", 0),
    }
    return manifest


def load_checkpoint(path):
    """Rebuild the model described by the manifest; returns ``(model, manifest)``.

    ``manifest['_optimizer']`` holds the saved Adam moments when present.
    """
    manifest = read_manifest(path)
    model = MMDiT(ModelConfig.from_dict(manifest["model_config"]))
    return model, load_into(model, path)
