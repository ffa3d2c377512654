"""On-disk tensor formats.

Tensor dump: ``<stem>.json`` sidecar ``{"dims": [...], "dtype": "f64"}`` next to
``<stem>.bin`` holding raw little-endian float64 values in row-major order.

Checkpoint container (single file)::

    bytes 0..7   header length N, unsigned 64-bit little-endian
    bytes 8..8+N UTF-8 JSON manifest
                 {"format": "spinemesh-tensors/1",
                  "tensors": [{"name", "dims", "dtype": "f64", "offset", "nbytes"}, ...],
                  "meta": {...}}
    remainder    concatenated raw little-endian float64 blobs; offsets are
                 relative to the start of this region
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "spinemesh-tensors/1"
_LE_F64 = np.dtype("<f8")


class TensorFormatError(ValueError):
    pass


def dump_tensor(array, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    arr = np.ascontiguousarray(np.asarray(array, dtype=_LE_F64))
    side = stem.with_suffix(".json")
    blob = stem.with_suffix(".bin")
    side.write_text(json.dumps({"dims": list(arr.shape), "dtype": "f64"}))
    blob.write_bytes(arr.tobytes())
    return side, blob


def load_tensor(stem) -> np.ndarray:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    if side.get("dtype") != "f64":
        raise TensorFormatError(f"{stem.with_suffix('.json')}: dtype must be 'f64'")
    dims = [int(d) for d in side["dims"]]
    raw = stem.with_suffix(".bin").read_bytes()
    if len(raw) != 8 * int(np.prod(dims)):
        raise TensorFormatError(f"{stem.with_suffix('.bin')}: {len(raw)} bytes for dims {dims}")
    return np.frombuffer(raw, dtype=_LE_F64).reshape(dims).astype(np.float64)


def save_container(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=_LE_F64))
        b = a.tobytes()
        entries.append({"name": name, "dims": list(a.shape), "dtype": "f64",
                        "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"format": FORMAT, "tensors": entries, "meta": dict(meta or {})},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_container(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TensorFormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        manifest = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: bad manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise TensorFormatError(f"{path}: unknown format {manifest.get('format')!r}")
    body = raw[8 + n:]
    out = {}
    for e in manifest["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"] or e["nbytes"] != 8 * int(np.prod(e["dims"])):
            raise TensorFormatError(f"{path}: tensor {e['name']!r} size mismatch")
        out[e["name"]] = np.frombuffer(chunk, dtype=_LE_F64).reshape(e["dims"]).astype(np.float64)
    return out, manifest.get("meta", {})
