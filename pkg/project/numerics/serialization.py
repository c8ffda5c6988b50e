"""Sidecar weight format: one binary file of little-endian 32-bit floats plus a JSON manifest that maps
group (layer id) -> tensor name -> {offset (bytes), shape}.

Weights are computed in float64 and rounded to float32 on save, so a reloaded network matches the saved one up to
that rounding. Saving a reloaded network again is lossless.
"""

import json
from pathlib import Path

import numpy as np

from project.errors import SchemaError

_DTYPE = np.dtype("<f4")

TensorGroups = dict[str, dict[str, np.ndarray]]


def manifest_path_for(weights_path: Path) -> Path:
    return weights_path.with_suffix(".manifest.json")


def save_tensors(weights_path: Path, groups: TensorGroups) -> Path:
    """Write all tensors in deterministic (sorted) order and return the manifest path."""
    manifest: dict[str, dict[str, dict]] = {}
    offset = 0

    weights_path.parent.mkdir(parents=True, exist_ok=True)

    with weights_path.open("wb") as f:
        for group in sorted(groups):
            manifest[group] = {}

            for name in sorted(groups[group]):
                array = np.ascontiguousarray(groups[group][name], dtype=_DTYPE)
                f.write(array.tobytes())
                manifest[group][name] = {"offset": offset, "shape": list(array.shape)}
                offset += array.nbytes

    manifest_path = manifest_path_for(weights_path)
    with manifest_path.open("w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    return manifest_path


def load_tensors(weights_path: Path) -> TensorGroups:
    manifest_path = manifest_path_for(weights_path)

    if not weights_path.is_file() or not manifest_path.is_file():
        raise FileNotFoundError(f"weights {weights_path} or manifest {manifest_path} not found")

    with manifest_path.open() as f:
        manifest = json.load(f)

    raw = weights_path.read_bytes()
    groups: TensorGroups = {}

    for group, tensors in manifest.items():
        groups[group] = {}

        for name, entry in tensors.items():
            shape = tuple(int(d) for d in entry["shape"])
            count = int(np.prod(shape)) if len(shape) > 0 else 1
            start = int(entry["offset"])
            end = start + count * _DTYPE.itemsize

            if end > len(raw):
                raise SchemaError(f"tensor {group}/{name} exceeds the weights file ({end} > {len(raw)} bytes)")

            groups[group][name] = np.frombuffer(raw[start:end], dtype=_DTYPE).astype(np.float64).reshape(shape)

    return groups
