"""Tensor archive: raw little-endian blobs plus a JSON manifest.

``save_archive(path, ...)`` writes ``path`` (binary) and ``path.json``
(manifest). The manifest lists every entry with its offset into the blob and
carries a SHA-256 of the blob, a format version and free-form metadata.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .logger import logger, CheckpointError

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_archive(
    path: Union[str, Path],
    tensors: Mapping[str, np.ndarray],
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for name, values in tensors.items():
        values = np.asarray(values)
        dtype_name = values.dtype.name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"Unsupported element type {dtype_name}", path=str(path), entry=name)
        raw = np.ascontiguousarray(values, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append({
            "name": name,
            "shape": list(values.shape),
            "dtype": dtype_name,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "metadata": metadata or {},
    }
    path.write_bytes(blob)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.debug("Archive written", path=str(path), entries=len(entries), nbytes=len(blob))
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise CheckpointError(f"Archive manifest not found: {mpath}", path=str(path))
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Archive manifest is not valid JSON: {e}", path=str(path)) from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Archive format version {version} does not match supported version {FORMAT_VERSION}",
            path=str(path),
        )
    return manifest


def load_archive(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Return (tensors by name, metadata), verifying the blob checksum."""
    path = Path(path)
    manifest = read_manifest(path)
    if not path.exists():
        raise CheckpointError(f"Archive blob not found: {path}", path=str(path))
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"Checksum mismatch for archive {path}", path=str(path))

    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(
                f"Unsupported element type {entry['dtype']}", path=str(path), entry=entry["name"]
            )
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        values = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = values.astype(entry["dtype"]).copy()
    return tensors, manifest.get("metadata", {})
