"""Container format shared by proxy files (.hfp) and checkpoints (.hfc).

Layout: 4-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then a flat little-endian float64 blob. The manifest lists every
array under ``"arrays"`` as ``{name: {"shape": [...], "offset": bytes}}``;
everything else in the manifest is free-form metadata.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint

_HEADER = struct.Struct("<4sQ")


def write_container(path, magic: bytes, meta: dict, arrays: dict) -> None:
    table, chunks, offset = {}, [], 0
    # sorted names give one canonical byte layout however the dict was built
    for name, arr in sorted(arrays.items()):
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        table[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = dict(meta)
    manifest["arrays"] = table
    manifest["blob_bytes"] = offset
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename keeps a crashed writer from leaving a half file behind
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(magic, len(head)))
            fh.write(head)
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, magic: bytes) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint(f"{path}: file too short")
    got, n = _HEADER.unpack_from(data)
    if got != magic:
        raise CorruptCheckpoint(f"{path}: bad magic {got!r}")
    start = _HEADER.size + n
    if len(data) < start:
        raise CorruptCheckpoint(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable manifest") from exc
    blob = data[start:]
    if len(blob) != manifest.get("blob_bytes", -1):
        raise CorruptCheckpoint(f"{path}: blob has {len(blob)} bytes, "
                                f"manifest says {manifest.get('blob_bytes')}")
    arrays = {}
    for name, entry in manifest.pop("arrays").items():
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        arrays[name] = arr.reshape(entry["shape"]).astype(np.float64)
    manifest.pop("blob_bytes")
    return manifest, arrays
