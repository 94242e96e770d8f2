"""Model persistence: JSON manifest plus a sidecar blob of float64 weights.

The manifest lists every layer's config and, per array, its name, shape, and
byte offset into the blob. The blob is little-endian float64 in exactly the
manifest-declared order, so a round trip restores weights bit for bit.
"""

import json
import os

import numpy as np

from ..errors import ModelFormatError, VersionError
from .layers import layer_from_config
from .model import Model

SCHEMA_VERSION = 1
FORMAT_NAME = "mofhei-model"


def save_model(model, path):
    """Write ``path`` (JSON manifest) and ``path + '.bin'`` (weight blob)."""
    blob_name = os.path.basename(path) + ".bin"
    layers = []
    chunks = []
    offset = 0
    for layer in model.layers:
        entry = layer.config()
        arrays = []
        for group, named in (("param", layer.param_arrays()), ("state", layer.state_arrays())):
            for name, arr in named.items():
                data = np.ascontiguousarray(arr, dtype="<f8")
                arrays.append({
                    "name": name,
                    "group": group,
                    "shape": list(arr.shape),
                    "offset": offset,
                })
                chunks.append(data.tobytes())
                offset += data.nbytes
        entry["arrays"] = arrays
        layers.append(entry)

    manifest = {
        "format": FORMAT_NAME,
        "schema_version": SCHEMA_VERSION,
        "input_shape": list(model.input_shape),
        "seed": model.seed,
        "metadata": model.metadata,
        "layers": layers,
        "blob": blob_name,
        "blob_bytes": offset,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(os.path.dirname(path) or ".", blob_name), "wb") as fh:
        fh.write(b"".join(chunks))


def load_model(path):
    """Load a model saved by :func:`save_model`; lossless round trip."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not a valid model manifest: {exc.msg}", offset=exc.pos) from exc

    if manifest.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"not a {FORMAT_NAME} file: {path}")
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionError(version, SCHEMA_VERSION)

    blob_path = os.path.join(os.path.dirname(path) or ".", manifest["blob"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    expected = int(manifest["blob_bytes"])
    if len(blob) != expected:
        raise ModelFormatError(
            f"weight blob length {len(blob)} != declared {expected}", offset=len(blob)
        )

    layers = [layer_from_config({k: v for k, v in cfg.items() if k != "arrays"})
              for cfg in manifest["layers"]]
    model = Model(manifest["input_shape"], layers,
                  seed=manifest.get("seed", 0), metadata=manifest.get("metadata"))

    for layer, cfg in zip(model.layers, manifest["layers"]):
        named = {**layer.param_arrays(), **layer.state_arrays()}
        for spec in cfg["arrays"]:
            arr = named.get(spec["name"])
            if arr is None or list(arr.shape) != list(spec["shape"]):
                raise ModelFormatError(
                    f"array {spec['name']!r} shape mismatch in layer {cfg['kind']}"
                )
            start = int(spec["offset"])
            end = start + arr.size * 8
            if end > len(blob):
                raise ModelFormatError("weight blob truncated", offset=len(blob))
            arr[...] = np.frombuffer(blob[start:end], dtype="<f8").reshape(arr.shape)
    return model
