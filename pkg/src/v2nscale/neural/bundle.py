"""Flat tensor bundle: magic, 8-byte little-endian header length, JSON manifest, float64 blob."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..features import FeatureScaler
from .network import NetConfig, NetParams, Network, build_layers, config_dict

MAGIC = b"V2NPARAM"


class BundleError(ValueError):
    pass


def dumps(params: NetParams) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name in sorted(params.weights):
        arr = np.ascontiguousarray(params.weights[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "config": config_dict(params.config),
        "input_dim": params.input_dim,
        "target_index": params.target_index,
        "x_scaler": params.x_scaler.to_dict(),
        "y_range": [params.y_lo, params.y_hi],
        "loss_history": list(params.loss_history),
        "tensors": tensors,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def loads(data: bytes) -> NetParams:
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 8:
        raise BundleError("not a parameter bundle (bad magic)")
    (n,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        manifest = json.loads(data[start:start + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"corrupt bundle manifest: {exc}") from None
    blob = np.frombuffer(data[start + n:], dtype="<f8")
    weights = {}
    for t in manifest["tensors"]:
        end = t["offset"] + t["count"]
        if end > blob.size:
            raise BundleError(f"tensor {t['name']} runs past end of bundle")
        weights[t["name"]] = blob[t["offset"]:end].reshape(t["shape"]).astype(np.float64)
    cfg = dict(manifest["config"])
    cfg["lookaheads"] = tuple(cfg["lookaheads"])
    lo, hi = manifest["y_range"]
    params = NetParams(NetConfig(**cfg), weights, manifest["input_dim"],
                       FeatureScaler.from_dict(manifest["x_scaler"]), lo, hi,
                       manifest["target_index"], list(manifest["loss_history"]))
    _check_shapes(params)
    return params


def _check_shapes(params: NetParams) -> None:
    layers = build_layers(params.config, params.input_dim, len(params.heads))
    ref = Network.create(layers, np.random.default_rng(0), 0.0).params
    if set(ref) != set(params.weights):
        raise BundleError(f"tensor names {sorted(params.weights)} do not match model {sorted(ref)}")
    for k, v in ref.items():
        if params.weights[k].shape != v.shape:
            raise BundleError(f"tensor {k} has shape {params.weights[k].shape}, model expects {v.shape}")
        if not np.all(np.isfinite(params.weights[k])):
            raise BundleError(f"tensor {k} has non-finite values")


def save(params: NetParams, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> NetParams:
    return loads(Path(path).read_bytes())
