"""Checkpoint directories: manifest.json plus one flat float32 payload.

The manifest lists every component (layer sizes, activation, parameter
count) in payload order; params.bin concatenates each component's
parameters flattened little-endian in declaration order. Loading
verifies all counts before any state is constructed, so a truncated
payload never yields partial state. Round trips are bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import MlpParams
from .errors import CorruptionError, InputError

CHECKPOINT_FORMAT = "egflow-checkpoint-v1"


def save_checkpoint(path, components: dict[str, MlpParams], step: int = 0,
                    config_hash: str = "", schedule: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write manifest.json + params.bin; component order is preserved."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest_components = []
    blobs = []
    for name, params in components.items():
        flat = params.flatten().astype("<f4")
        manifest_components.append({
            "name": name,
            "layer_sizes": params.sizes,
            "activation": params.activation,
            "param_count": int(flat.size),
        })
        blobs.append(flat.tobytes())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "step": int(step),
        "components": manifest_components,
        "schedule": schedule,
        "extra": extra or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, MlpParams], dict]:
    """Rebuild every component; returns (components, manifest)."""
    root = Path(path)
    mpath, ppath = root / "manifest.json", root / "params.bin"
    if not mpath.exists() or not ppath.exists():
        raise InputError(f"{root} is not a checkpoint directory")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptionError("unrecognized checkpoint format")
    raw = ppath.read_bytes()
    entries = manifest["components"]
    total = sum(entry["param_count"] for entry in entries)
    if len(raw) != 4 * total:
        raise CorruptionError(
            f"payload holds {len(raw)} bytes, manifest implies {4 * total}")
    flat = np.frombuffer(raw, dtype="<f4")
    components: dict[str, MlpParams] = {}
    pos = 0
    for entry in entries:
        sizes = entry["layer_sizes"]
        expected = sum(fi * fo + fo for fi, fo in zip(sizes[:-1], sizes[1:]))
        if expected != entry["param_count"]:
            raise CorruptionError(
                f"component {entry['name']}: sizes imply {expected} params, "
                f"manifest says {entry['param_count']}")
        params = MlpParams(
            weights=[np.zeros((fi, fo), dtype=np.float32)
                     for fi, fo in zip(sizes[:-1], sizes[1:])],
            biases=[np.zeros(fo, dtype=np.float32) for fo in sizes[1:]],
            activation=entry["activation"])
        params.load_flat(flat[pos:pos + entry["param_count"]])
        pos += entry["param_count"]
        components[entry["name"]] = params
    return components, manifest
