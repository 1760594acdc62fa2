"""Named-tensor container used for checkpoints and datasets.

Layout (little-endian)::

    b"PGDD"  u32 version
    u64 metadata length, metadata as UTF-8 JSON
    u64 tensor count
    per tensor: u32 name length, name (UTF-8), u32 dtype code, u32 rank,
                rank x u64 dims, raw data

dtype code 0 is float32; 1 (int64) is accepted for dataset label columns only.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .guide import GuideSpec
from .network import DenoiserSpec, ParameterSet

MAGIC = b"PGDD"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}

_UMASK = os.umask(0)
os.umask(_UMASK)


class CheckpointError(ValueError):
    pass


def _atomic_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    mj = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<Q", len(mj)), mj, struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = next((c for c, d in DTYPES.items() if arr.dtype == d), None)
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<II", code, arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated file")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a PGDD container")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{source}: unknown format version {version} (this build reads {VERSION})")
    (mlen,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<Q", take(8))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<II", take(8))
        if code not in DTYPES:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return meta, tensors


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_params(params: ParameterSet, path) -> str:
    """Write a checkpoint bundle; returns its sha256."""
    for name, v in params.tensors.items():
        if v.dtype != np.float32:
            raise CheckpointError(f"parameter {name!r} must be float32, got {v.dtype}")
    meta = {
        "owner": params.owner,
        "spec": params.spec.to_dict(),
        "schedule": (params.spec.base_spec if params.owner == "guide" else params.spec).schedule.to_dict(),
        "meta": params.meta,
    }
    data = encode(meta, params.tensors)
    _atomic_bytes(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load_params(path, owner: str | None = None) -> ParameterSet:
    path = Path(path)
    meta, tensors = decode(path.read_bytes(), str(path))
    if "owner" not in meta or "spec" not in meta:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    if owner is not None and meta["owner"] != owner:
        raise CheckpointError(f"{path}: checkpoint owner is {meta['owner']!r}, expected {owner!r}")
    spec = DenoiserSpec.from_dict(meta["spec"]) if meta["owner"] == "base" else GuideSpec.from_dict(meta["spec"])
    return ParameterSet(meta["owner"], spec, tensors, meta.get("meta", {}))


def save_dataset(ds, path) -> str:
    tensors = {
        "x": ds.x.astype(np.float32),
        "labels": ds.labels.astype(np.float32),
        "x_holdout": ds.x_holdout.astype(np.float32),
        "labels_holdout": ds.labels_holdout.astype(np.float32),
    }
    data = encode({"kind": ds.kind, "params": ds.params, "owner": "dataset"}, tensors)
    _atomic_bytes(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path):
    from .data import Dataset

    path = Path(path)
    meta, t = decode(path.read_bytes(), str(path))
    if meta.get("owner") != "dataset":
        raise CheckpointError(f"{path}: not a dataset container")
    return Dataset(
        meta["kind"],
        t["x"],
        t["labels"].astype(np.int64),
        t["x_holdout"],
        t["labels_holdout"].astype(np.int64),
        meta["params"],
    )
