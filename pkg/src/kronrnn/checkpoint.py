"""Checkpoints: a JSON manifest plus a little-endian float64 binary payload.

The payload stores parameters in their declaration order (dict insertion
order of the cell's parameter tree); complex entries are written as
interleaved (re, im) float64 pairs.  Both files are written atomically,
and a save -> load -> save round trip is byte-identical.
"""

import json
import os

import numpy as np

from .errors import CheckpointError
from .training import tree_leaves

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "params.bin"
FORMAT_VERSION = 1


def _atomic_write_bytes(path, data):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text):
    _atomic_write_bytes(path, text.encode())


def save_checkpoint(ckpt_dir, params, model_hash, step=0, metric_history=(),
                    rng_state=None, extra=None):
    os.makedirs(ckpt_dir, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tree_leaves(params):
        if np.iscomplexobj(arr):
            payload = np.ascontiguousarray(arr, dtype="<c16").tobytes()
            field = "complex"
        else:
            payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            field = "real"
        entries.append({"name": name, "field": field,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(payload)})
        chunks.append(payload)
        offset += len(payload)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_hash": model_hash,
        "step": int(step),
        "metric_history": [float(x) for x in metric_history],
        "rng_state": rng_state or {},
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    _atomic_write_bytes(os.path.join(ckpt_dir, PAYLOAD_NAME), b"".join(chunks))
    atomic_write_text(os.path.join(ckpt_dir, MANIFEST_NAME),
                      json.dumps(manifest, indent=2))
    return manifest


def load_checkpoint(ckpt_dir, expected_hash=None):
    """Load (params, manifest); verifies the model hash when given."""
    manifest_path = os.path.join(ckpt_dir, MANIFEST_NAME)
    payload_path = os.path.join(ckpt_dir, PAYLOAD_NAME)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
        with open(payload_path, "rb") as f:
            payload = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {ckpt_dir}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {ckpt_dir}: {exc}") from exc
    if expected_hash is not None and manifest.get("model_hash") != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint has {manifest.get('model_hash')}, "
            f"config expects {expected_hash}")

    params = {}
    for entry in manifest["params"]:
        dtype = "<c16" if entry["field"] == "complex" else "<f8"
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"payload truncated at entry {entry['name']}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype)
        arr = arr.reshape(entry["shape"]).copy()
        name = entry["name"]
        if "." in name:
            key, idx = name.rsplit(".", 1)
            params.setdefault(key, [])
            lst = params[key]
            if len(lst) != int(idx):
                raise CheckpointError(f"factor entries out of order at {name}")
            lst.append(arr)
        else:
            params[name] = arr
    return params, manifest
