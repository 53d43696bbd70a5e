"""Bit-exact model persistence: a JSON manifest followed by raw
little-endian float64 parameter blocks.

Layout: 6-byte magic, 8-byte little-endian header length, UTF-8 JSON
manifest, then every parameter array's bytes in manifest order. The
manifest records shapes, a content hash of the parameters, and (for
correction-network checkpoints) the hash of the frozen base they were
trained against; loading against a different base is refused.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Optional, Sequence

import numpy as np

__all__ = ["FORMAT_VERSION", "params_hash", "save_checkpoint",
           "load_checkpoint", "require_base_match", "CheckpointError"]

MAGIC = b"CLCK1\n"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for unreadable, mismatched, or refused checkpoint files."""


def params_hash(params: Sequence[np.ndarray]) -> str:
    """Content hash over shapes and little-endian float64 bytes."""
    hasher = hashlib.sha256()
    for p in params:
        arr = np.ascontiguousarray(np.asarray(p, dtype="<f8"))
        hasher.update(str(arr.shape).encode())
        hasher.update(arr.tobytes())
    return hasher.hexdigest()


def save_checkpoint(path: str, params: Sequence[np.ndarray],
                    manifest: Optional[dict] = None) -> dict:
    """Write params plus manifest; returns the completed manifest.

    The write goes through a temporary file and an atomic rename so a
    crash never leaves a half-written checkpoint behind.
    """
    arrays = [np.ascontiguousarray(np.asarray(p, dtype="<f8")) for p in params]
    man = dict(manifest or {})
    man["version"] = FORMAT_VERSION
    man["shapes"] = [list(a.shape) for a in arrays]
    man["param_hash"] = params_hash(arrays)
    header = json.dumps(man, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for a in arrays:
            fh.write(a.tobytes())
    os.replace(tmp, path)
    return man


def load_checkpoint(path: str) -> tuple[dict, list[np.ndarray]]:
    """Read back (manifest, params); any inconsistency is a clean error."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    off = len(MAGIC)
    hlen = int.from_bytes(blob[off:off + 8], "little")
    off += 8
    if off + hlen > len(blob):
        raise CheckpointError(f"{path} is truncated inside the manifest")
    try:
        man = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt manifest: {e}") from e
    off += hlen
    if man.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {man.get('version')!r} unsupported "
            f"(expected {FORMAT_VERSION})")
    shapes = [tuple(s) for s in man.get("shapes", [])]
    total = sum(int(np.prod(s)) if s else 1 for s in shapes)
    body = blob[off:]
    if len(body) != total * 8:
        raise CheckpointError(
            f"{path} is truncated: payload {len(body)} bytes, "
            f"manifest promises {total * 8}")
    params: list[np.ndarray] = []
    pos = 0
    for s in shapes:
        cnt = int(np.prod(s)) if s else 1
        arr = np.frombuffer(body, dtype="<f8", count=cnt, offset=pos * 8)
        params.append(arr.reshape(s).astype(np.float64))
        pos += cnt
    got = params_hash(params)
    if got != man.get("param_hash"):
        raise CheckpointError(
            f"{path} failed its content check: stored hash "
            f"{man.get('param_hash')}, recomputed {got}")
    return man, params


def require_base_match(h_manifest: dict, base_params: Sequence[np.ndarray],
                       path: str = "<checkpoint>") -> None:
    """Refuse a correction-network checkpoint whose frozen base differs."""
    expected = h_manifest.get("base_hash")
    if expected is None:
        raise CheckpointError(f"{path} records no base hash")
    actual = params_hash(base_params)
    if actual != expected:
        raise CheckpointError(
            f"{path} was trained against base {expected} but the supplied "
            f"base hashes to {actual}; refusing to load")
