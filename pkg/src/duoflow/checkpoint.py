"""Self-describing binary checkpoints.

Layout: 8-byte magic, 8-byte little-endian header length, a canonical JSON
header, then a raw little-endian array payload.  The header's manifest maps
each array name to shape, dtype, byte offset, a frozen flag, and the stage
that last trained it.  Offsets are assigned in sorted name order and must
tile the payload exactly, so any tampering with the manifest is detectable
without reading array contents.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DFCKPT01"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}

__all__ = ["Checkpoint", "CheckpointError", "checkpoint_from", "load_checkpoint",
           "restore_model", "restore_optimizer", "save_checkpoint"]


class CheckpointError(RuntimeError):
    """Malformed file, corrupt manifest, or a model/manifest mismatch."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype == np.float32:
        return "<f4"
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file."""

    stage: int
    step: int
    model_config: dict
    arrays: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)
    param_stage: dict[str, int] = field(default_factory=dict)


def checkpoint_from(
    model,
    *,
    stage: int,
    step: int,
    optimizer=None,
    frozen_names=(),
    param_stages: dict[str, int] | None = None,
) -> Checkpoint:
    """Snapshot a model (and optionally optimizer state) for saving.

    ``frozen_names`` marks parameters the current stage must not touch;
    ``param_stages`` records which stage last trained each parameter
    (defaulting to the current stage).
    """
    arrays = {name: p.data.copy() for name, p in model.named_params().items()}
    frozen = {name: name in set(frozen_names) for name in arrays}
    stages = {name: (param_stages or {}).get(name, stage) for name in arrays}
    if optimizer is not None:
        for name, arr in optimizer.state_arrays().items():
            arrays[name] = np.asarray(arr).copy()
            frozen[name] = False
            stages[name] = stage
    return Checkpoint(
        stage=stage,
        step=step,
        model_config=dataclasses.asdict(model.cfg),
        arrays=arrays,
        frozen=frozen,
        param_stage=stages,
    )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write the canonical byte serialization (stable for identical content)."""
    manifest: dict[str, dict] = {}
    payload = bytearray()
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        tag = _dtype_tag(arr)
        data = arr.astype(_DTYPES[tag], copy=False).tobytes()
        manifest[name] = {
            "shape": list(arr.shape),
            "dtype": tag,
            "offset": len(payload),
            "frozen": bool(ckpt.frozen.get(name, False)),
            "stage": int(ckpt.param_stage.get(name, ckpt.stage)),
        }
        payload.extend(data)
    header = {
        "format": FORMAT_VERSION,
        "stage": int(ckpt.stage),
        "step": int(ckpt.step),
        "model": ckpt.model_config,
        "params": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint; corrupt manifests are rejected."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
    payload = raw[16 + hlen :]
    manifest = header["params"]

    spans = []
    for name, meta in manifest.items():
        tag = meta["dtype"]
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {tag!r} for '{name}'")
        size = int(np.prod(meta["shape"], dtype=np.int64)) * _DTYPES[tag].itemsize
        offset = int(meta["offset"])
        if offset < 0 or offset + size > len(payload):
            raise CheckpointError(f"{path}: manifest offset for '{name}' out of range")
        spans.append((offset, size, name))
    spans.sort()
    cursor = 0
    for offset, size, name in spans:
        if offset != cursor:
            raise CheckpointError(
                f"{path}: manifest offsets corrupt near '{name}' "
                f"(expected {cursor}, found {offset})"
            )
        cursor += size
    if cursor != len(payload):
        raise CheckpointError(
            f"{path}: payload length {len(payload)} does not match manifest ({cursor})"
        )

    arrays: dict[str, np.ndarray] = {}
    frozen: dict[str, bool] = {}
    stages: dict[str, int] = {}
    for name, meta in manifest.items():
        dtype = _DTYPES[meta["dtype"]]
        size = int(np.prod(meta["shape"], dtype=np.int64)) * dtype.itemsize
        start = int(meta["offset"])
        arr = np.frombuffer(payload[start : start + size], dtype=dtype)
        arrays[name] = arr.reshape(meta["shape"]).copy()
        frozen[name] = bool(meta["frozen"])
        stages[name] = int(meta["stage"])
    return Checkpoint(
        stage=int(header["stage"]),
        step=int(header["step"]),
        model_config=dict(header["model"]),
        arrays=arrays,
        frozen=frozen,
        param_stage=stages,
    )


def restore_model(model, ckpt: Checkpoint, names=None, strict: bool = True) -> None:
    """Copy checkpoint arrays into matching model parameters.

    ``names`` restricts the restore to a subset (e.g. backbone only when
    adapting a checkpoint into a model with extra branch parameters).  With
    ``strict`` every requested parameter must exist in the checkpoint with
    the exact shape.
    """
    params = model.named_params()
    wanted = set(params) if names is None else set(names)
    missing = wanted - set(params)
    if missing:
        raise CheckpointError(f"model has no parameters named {sorted(missing)}")
    for name in sorted(wanted):
        if name not in ckpt.arrays:
            if strict:
                raise CheckpointError(f"checkpoint is missing parameter '{name}'")
            continue
        src = ckpt.arrays[name]
        dst = params[name].data
        if tuple(src.shape) != tuple(dst.shape):
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {tuple(src.shape)} "
                f"vs model {tuple(dst.shape)}"
            )
        dst[...] = src.astype(dst.dtype, copy=False)


def restore_optimizer(optimizer, ckpt: Checkpoint) -> None:
    """Load moment buffers and step counter saved by ``checkpoint_from``."""
    state = {k: v for k, v in ckpt.arrays.items() if k.startswith("opt.")}
    if not state:
        raise CheckpointError("checkpoint carries no optimizer state")
    optimizer.load_state_arrays(state)
