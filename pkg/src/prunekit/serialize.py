"""On-disk model format, version 1.

A model is a directory holding ``manifest.json`` and one raw blob per
weight tensor. Blobs are little-endian float32 in C order; the manifest
records each blob's file name, shape and byte length.
"""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from prunekit.errors import BlobShapeMismatchError, GraphError, ManifestError, TruncatedBlobError
from prunekit.model_ir import LayerSpec, ModelGraph, ModelMeta, expected_weight_shapes, validate

FORMAT = "prunekit-model"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
DTYPE = "<f4"


def save_model(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for layer in model.layers:
        for name, arr in model.weights.get(layer.id, {}).items():
            fname = f"{layer.id}.{name}.bin"
            data = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
            (path / fname).write_bytes(data)
            tensors.append({
                "layer": layer.id,
                "name": name,
                "shape": list(arr.shape),
                "dtype": DTYPE,
                "file": fname,
                "nbytes": len(data),
            })
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "meta": model.meta.to_json(),
        "layers": [_layer_json(l) for l in model.layers],
        "tensors": tensors,
        "provenance": model.provenance,
    }
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    os.replace(tmp, path / MANIFEST)
    return path


def _layer_json(layer: LayerSpec):
    d = dataclasses.asdict(layer)
    d["inputs"] = list(layer.inputs)
    return d


def load_manifest(path) -> dict:
    path = Path(path)
    mpath = path / MANIFEST if path.is_dir() else path
    if not mpath.is_file():
        raise ManifestError(f"no model manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"{mpath}: not valid JSON ({e})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise ManifestError(f"{mpath}: not a {FORMAT} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"{mpath}: unsupported format version {manifest.get('format_version')!r}")
    for key in ("meta", "layers", "tensors"):
        if key not in manifest:
            raise ManifestError(f"{mpath}: missing {key!r}")
    return manifest


def load_model(path) -> ModelGraph:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = load_manifest(path)
    try:
        layers = [
            LayerSpec(**{**d, "inputs": tuple(d["inputs"])}) for d in manifest["layers"]
        ]
        meta = ModelMeta(**manifest["meta"])
    except (TypeError, KeyError) as e:
        raise ManifestError(f"{root}: malformed layer or meta record ({e})") from None
    by_id = {l.id: l for l in layers}

    weights: dict[str, dict[str, np.ndarray]] = {}
    for rec in manifest["tensors"]:
        try:
            lid, name, shape, fname, nbytes = rec["layer"], rec["name"], tuple(rec["shape"]), rec["file"], rec["nbytes"]
        except KeyError as e:
            raise ManifestError(f"{root}: tensor record missing {e.args[0]!r}") from None
        if rec.get("dtype", DTYPE) != DTYPE:
            raise ManifestError(f"{lid}.{name}: unsupported dtype {rec.get('dtype')!r}")
        if lid not in by_id:
            raise ManifestError(f"tensor {lid}.{name} belongs to no layer")
        want = expected_weight_shapes(by_id[lid]).get(name)
        if want is None:
            raise ManifestError(f"layer {lid} has no tensor named {name!r}")
        if shape != want:
            raise BlobShapeMismatchError(f"{lid}.{name}: blob shape {shape}, layer spec implies {want}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise BlobShapeMismatchError(f"{lid}.{name}: {nbytes} bytes recorded for shape {shape}")
        fpath = root / fname
        if not fpath.is_file():
            raise ManifestError(f"{lid}.{name}: blob file {fname} is missing")
        data = fpath.read_bytes()
        if len(data) != nbytes:
            raise TruncatedBlobError(f"{fname}: {len(data)} bytes on disk, manifest records {nbytes}")
        weights.setdefault(lid, {})[name] = np.frombuffer(data, dtype=DTYPE).astype(np.float32).reshape(shape)

    model = ModelGraph(tuple(layers), weights, meta, manifest.get("provenance"))
    try:
        validate(model)
    except GraphError as e:
        raise ManifestError(f"{root}: invalid model graph: {e}") from None
    return model
