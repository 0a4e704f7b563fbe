"""Checkpoint containers: one binary blob per named tensor plus a metadata
text file. Blob layout: u32 name length, utf-8 name, u32 rank, u32 dims,
float32 little-endian payload. Deterministic on disk for byte-identical reruns."""

import hashlib
import json
import os
import struct

import numpy as np


class CheckpointMismatch(Exception):
    pass


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _write_blob(f, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes())


def _take(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointMismatch(f"truncated tensor blob ({what})")
    return raw


def _read_blob(f):
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointMismatch("truncated tensor blob (header)")
    (nlen,) = struct.unpack("<I", head)
    name = _take(f, nlen, "name").decode("utf-8")
    (rank,) = struct.unpack("<I", _take(f, 4, name))
    dims = struct.unpack(f"<{rank}I", _take(f, 4 * rank, name)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = _take(f, 4 * count, name)
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


def save_tensors(directory, named) -> None:
    """Write {name: array} as tensors.bin (sorted by name) under directory."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "tensors.bin"), "wb") as f:
        for name in sorted(named):
            _write_blob(f, name, named[name])


def load_tensors(directory) -> dict:
    path = os.path.join(directory, "tensors.bin")
    if not os.path.exists(path):
        raise CheckpointMismatch(f"no tensor blobs under {directory}")
    out = {}
    with open(path, "rb") as f:
        while True:
            rec = _read_blob(f)
            if rec is None:
                break
            out[rec[0]] = rec[1]
    return out


def save_meta(directory, mapping) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "meta.txt"), "w", encoding="utf-8") as f:
        for k in sorted(mapping):
            f.write(f"{k} = {mapping[k]}\n")


def load_meta(directory) -> dict:
    path = os.path.join(directory, "meta.txt")
    if not os.path.exists(path):
        raise CheckpointMismatch(f"no checkpoint metadata under {directory}")
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            k, _, v = line.partition(" = ")
            out[k] = v
    return out


def require_meta(meta: dict, key: str, expect: str, where: str):
    got = meta.get(key)
    if got != expect:
        raise CheckpointMismatch(f"{where}: {key} is {got!r}, expected {expect!r}")


def tensor_checksum(named) -> str:
    """Order-independent digest over named float32 payloads (freeze auditing)."""
    h = hashlib.sha256()
    for name in sorted(named):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(named[name], dtype="<f4").tobytes())
    return h.hexdigest()
