"""Manifest + raw-blob persistence.

Both datasets and model checkpoints are stored as a JSON manifest next to
raw little-endian float64 blobs (row-major). Blobs round-trip bit-exactly,
which is what makes reruns byte-identical.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataValidationError


def write_blob(path, array: np.ndarray) -> dict:
    """Write ``array`` as little-endian float64 bytes; returns its manifest entry."""
    path = Path(path)
    data = np.ascontiguousarray(array, dtype="<f8").tobytes()
    path.write_bytes(data)
    return {"file": path.name, "shape": list(array.shape)}


def read_blob(path, shape) -> np.ndarray:
    path = Path(path)
    expected = int(np.prod(shape)) * 8
    data = path.read_bytes()
    if len(data) != expected:
        raise DataValidationError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)}, got {len(data)}"
        )
    return np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
