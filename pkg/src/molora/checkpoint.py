"""Bit-exact checkpoint container: one JSON manifest line, then raw float64.

Layout: a single UTF-8 JSON object terminated by a newline, followed by the
concatenated little-endian float64 parameter payload. The manifest records the
format version, the full run-config snapshot, a fingerprint of the
model-defining parts of that config, and per-parameter (name, shape, offset)
entries. Loading verifies the fingerprint against the caller's config and
reproduces every array bitwise.
"""

from __future__ import annotations

import json

import numpy as np

from .config import RunConfig
from .model import TinyDecoder, build_model

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt, or mismatched checkpoint."""


def save_checkpoint(model: TinyDecoder, config: RunConfig, path) -> None:
    params = model.params()
    entries = []
    offset = 0
    blobs = []
    for p in params:
        blob = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.raw,
        "fingerprint": config.model_fingerprint(),
        "seed": model.seed,
        "params": entries,
        "payload_bytes": offset,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected: RunConfig | None = None) -> tuple[TinyDecoder, RunConfig]:
    """Rebuild the model from a checkpoint, verifying shape and fingerprint.

    When ``expected`` is given, its model fingerprint must match the stored
    one; a mismatch is an error, not a warning.
    """
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload has {len(payload)} bytes, manifest promises {manifest['payload_bytes']}"
        )
    stored = RunConfig.from_dict(manifest["config"])
    if stored.model_fingerprint() != manifest["fingerprint"]:
        raise CheckpointError("checkpoint fingerprint does not match its own config snapshot")
    if expected is not None and expected.model_fingerprint() != manifest["fingerprint"]:
        raise CheckpointError(
            "checkpoint was written for a different model configuration "
            f"(stored {manifest['fingerprint'][:12]}..., expected {expected.model_fingerprint()[:12]}...)"
        )
    model = build_model(stored.model, stored.lora, stored.mora, seed=int(manifest["seed"]))
    by_name = {p.name: p for p in model.params()}
    if set(by_name) != {e["name"] for e in manifest["params"]}:
        raise CheckpointError("checkpoint parameter names do not match the rebuilt model")
    for entry in manifest["params"]:
        p = by_name[entry["name"]]
        shape = tuple(entry["shape"])
        if p.shape != shape:
            raise CheckpointError(f"{entry['name']}: stored shape {shape}, model has {p.shape}")
        count = shape[0] * shape[1]
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        p.value[:] = arr.reshape(shape)
    return model, stored
