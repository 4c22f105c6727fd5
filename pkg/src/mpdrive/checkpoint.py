"""Single-file tensor container.

Layout: a UTF-8 JSON manifest object immediately followed by the raw
payload. The manifest maps tensor name -> {"shape": [...], "dtype":
"f64", "offset": int}; offsets are element counts into one contiguous
little-endian IEEE-754 float64 payload, tensors stored in manifest key
order (sorted). There is no length prefix: readers locate the manifest
end by scanning for the balanced closing brace outside any JSON string.

Writing the same mapping twice yields byte-identical files, which the
reproducibility checks rely on.
"""

from __future__ import annotations

import json
from typing import Dict

import numpy as np

__all__ = ["save_tensors", "load_tensors", "manifest_end", "CheckpointError"]


class CheckpointError(ValueError):
    pass


def manifest_end(blob: bytes) -> int:
    """Index one past the closing brace of the leading JSON object.

    Braces inside JSON strings (and escaped quotes inside those strings)
    do not count toward nesting.
    """
    if not blob or blob[0:1] != b"{":
        raise CheckpointError("container does not start with a JSON object")
    depth = 0
    in_string = False
    escaped = False
    for i, byte in enumerate(blob):
        ch = chr(byte)
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    raise CheckpointError("unterminated manifest")


def save_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write name->array mapping; arrays are converted to float64."""
    arrays = {}
    for name in sorted(tensors):
        # tobytes() below always emits C order; avoid ascontiguousarray,
        # which silently promotes 0-d arrays to shape (1,)
        arr = np.asarray(tensors[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor '{name}' contains non-finite values")
        arrays[name] = arr

    manifest = {}
    offset = 0
    for name, arr in arrays.items():
        manifest[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset}
        offset += arr.size

    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(header)
        for arr in arrays.values():
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    end = manifest_end(blob)
    try:
        manifest = json.loads(blob[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from e
    payload = np.frombuffer(blob[end:], dtype="<f8")

    out = {}
    for name, meta in manifest.items():
        shape = tuple(meta["shape"])
        if meta.get("dtype") != "f64":
            raise CheckpointError(f"tensor '{name}': unsupported dtype {meta.get('dtype')}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = meta["offset"]
        if start + n > payload.size:
            raise CheckpointError(f"tensor '{name}' extends past payload end")
        out[name] = payload[start:start + n].reshape(shape).astype(np.float64)
    return out
