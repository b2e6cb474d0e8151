"""Checkpoint files: concatenated RTF1 records followed by a JSON manifest.

File layout::

    RTF1 record 0 | RTF1 record 1 | ... | manifest JSON | u64 LE manifest length | b"AUCK"

The manifest maps every parameter name to its byte offset and length and
echoes the model config, epoch, seed, gate overrides and alpha vector.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from . import rtf
from .model import AddUNetConfig, ConfigError, ModelState, alpha, build

TRAILER = b"AUCK"
FORMAT = "addunet-checkpoint-1"


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncation or unreadable manifest."""


class ManifestMismatchError(CheckpointError):
    """Manifest disagrees with the stored tensors or the expected config."""


def save_checkpoint(model: ModelState, path, meta: dict | None = None) -> dict:
    meta = dict(meta or {})
    body = io.BytesIO()
    tensors = {}
    for name, p in model.params.items():
        rec = rtf.encode(p.value)
        tensors[name] = {"offset": body.tell(), "nbytes": len(rec)}
        body.write(rec)
    manifest = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "tensors": tensors,
        "epoch": meta.pop("epoch", None),
        "seed": meta.pop("seed", None),
        "alpha": alpha(model) if model.config.has_gates else None,
        "gate_overrides": {str(k): v for k, v in sorted(model.gate_overrides.items())},
        "meta": meta,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    Path(path).write_bytes(body.getvalue() + mbytes + struct.pack("<Q", len(mbytes)) + TRAILER)
    return manifest


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[-4:] != TRAILER:
        raise CorruptCheckpointError(f"{path}: missing checkpoint trailer (truncated or not a checkpoint)")
    (mlen,) = struct.unpack("<Q", raw[-12:-4])
    if mlen > len(raw) - 12:
        raise CorruptCheckpointError(f"{path}: manifest length {mlen} exceeds file size")
    body, mbytes = raw[: len(raw) - 12 - mlen], raw[len(raw) - 12 - mlen : -12]
    try:
        manifest = json.loads(mbytes)
    except ValueError as e:
        raise CorruptCheckpointError(f"{path}: unreadable manifest: {e}") from None
    if manifest.get("format") != FORMAT:
        raise CorruptCheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest, body


def load_checkpoint(path, expected: AddUNetConfig | None = None) -> tuple[ModelState, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    manifest, body = read_manifest(path)
    try:
        config = AddUNetConfig.from_dict(manifest["config"])
    except (TypeError, ConfigError) as e:
        raise ManifestMismatchError(f"{path}: invalid config in manifest: {e}") from None
    if expected is not None and expected != config:
        raise ManifestMismatchError(f"{path}: checkpoint config {config} does not match expected {expected}")
    entries = manifest["tensors"]
    arrays = {}
    for name, ent in entries.items():
        chunk = body[ent["offset"] : ent["offset"] + ent["nbytes"]]
        try:
            arrays[name] = rtf.decode(chunk)
        except rtf.RTFError as e:
            raise CorruptCheckpointError(f"{path}: tensor {name!r}: {e}") from None
    dtypes = {a.dtype for a in arrays.values()}
    if len(dtypes) != 1:
        raise ManifestMismatchError(f"{path}: mixed tensor dtypes {dtypes}")
    model = build(config, seed=0, dtype=dtypes.pop())
    if set(model.params) != set(arrays):
        raise ManifestMismatchError(
            f"{path}: tensors {sorted(set(arrays) ^ set(model.params))} disagree with config"
        )
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise ManifestMismatchError(f"{path}: {name} has shape {arrays[name].shape}, config implies {p.shape}")
        p.value = arrays[name]
    model.gate_overrides = {int(k): float(v) for k, v in manifest.get("gate_overrides", {}).items()}
    if manifest.get("alpha") is not None and config.has_gates:
        if not np.allclose(manifest["alpha"], alpha(model), rtol=0, atol=0):
            raise ManifestMismatchError(f"{path}: manifest alpha echo disagrees with stored gates")
    return model, manifest
