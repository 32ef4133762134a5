"""Array container shared by checkpoints and feature indexes.

A container is a pair of files: <stem>.manifest.json listing array names,
shapes, dtypes and byte offsets (plus free-form JSON metadata), and
<stem>.blob holding the raw little-endian array bytes back to back.
Writing is canonical (sorted names, sorted JSON keys), so a
write -> read -> write round trip is byte-identical.
"""

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class ContainerError(ValueError):
    """Malformed or incompatible container files."""


def _paths(stem):
    stem = Path(stem)
    return stem.with_suffix(stem.suffix + ".manifest.json"), \
        stem.with_suffix(stem.suffix + ".blob")


def save_container(stem, arrays, meta=None, kind="checkpoint"):
    """arrays: {name: ndarray} (float32/float64). meta: JSON-serializable."""
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            arr = arr.astype("<f8")
        else:
            arr = arr.astype("<f4")
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arrays": entries,
        "meta": meta if meta is not None else {},
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(blob_path, "wb") as f:
        for raw in blobs:
            f.write(raw)
    return manifest_path, blob_path


def load_container(stem):
    """Returns (arrays {name: ndarray}, meta, kind)."""
    manifest_path, blob_path = _paths(stem)
    if not manifest_path.exists() or not blob_path.exists():
        raise ContainerError(f"container {stem} incomplete: need "
                             f"{manifest_path.name} and {blob_path.name}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported format_version {manifest.get('format_version')}")
    blob = blob_path.read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerError(f"unsupported dtype {entry['dtype']} for {entry['name']}")
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContainerError(f"blob truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return arrays, manifest["meta"], manifest["kind"]
