"""Single-file checkpoints.

Layout::

    b"WMNVCKPT"  | uint64 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every tensor's name, shape, dtype, byte offset and byte
count inside the payload, plus free-form metadata (algorithm, beam count,
stage) and a SHA-256 of the payload. Tensor data is raw little-endian.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"WMNVCKPT"
CHECKPOINT_VERSION = "v1"
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head + payload)
    os.replace(tmp, path)


def read_manifest(path: str | os.PathLike) -> dict:
    return _read(path, payload=False)[0]


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return (tensors, meta). Raises CheckpointError on any integrity problem;
    nothing is returned unless the whole file validates."""
    manifest, payload = _read(path, payload=True)
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"])
        tensors[e["name"]] = arr.reshape(e["shape"])
    return tensors, manifest["meta"]


def _read(path, payload: bool):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(data):
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt manifest") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')!r} != supported {CHECKPOINT_VERSION!r}")
    body = data[start + n:]
    if len(body) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"truncated payload: {len(body)} bytes, manifest expects {manifest['payload_bytes']}")
    if payload and hashlib.sha256(body).hexdigest() != manifest["sha256"]:
        raise CheckpointError("payload checksum mismatch")
    return manifest, body


def check_compatible(meta: dict, algorithm: str, n_beams: int) -> None:
    if meta.get("algorithm") != algorithm:
        raise CheckpointError(f"checkpoint algorithm {meta.get('algorithm')!r} does not match {algorithm!r}")
    if meta.get("n_beams") != n_beams:
        raise CheckpointError(f"checkpoint has {meta.get('n_beams')} beams, run uses {n_beams}")
