"""Binary checkpoint container.

Layout (all integers little-endian):

    magic      8 bytes  b"PIACKPT1"
    config     u32 byte length, then that many UTF-8 bytes
               (a ``key = value`` block sufficient to rebuild the model)
    fingerprint u32 length + hex sha256 of the config block
    count      u32 number of tensor records
    record     u32 name length + name bytes
               u8 ndim, then ndim u64 dims
               float64 little-endian C-order data

Tensor records cover model parameters, batch-norm running buffers, and the
prototype bank (prototypes, init flags as 0/1, alpha, iteration).  Equal
states serialize to equal bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from . import bpl, model

MAGIC = b"PIACKPT1"


class CheckpointError(ValueError):
    """Raised on malformed checkpoint files."""


def _pack_blob(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _tensor_record(name: str, array: np.ndarray) -> bytes:
    data = np.asarray(array, dtype=np.float64)
    if data.ndim:
        # ascontiguousarray would silently promote 0-d arrays to shape (1,)
        data = np.ascontiguousarray(data)
    name_b = name.encode("utf-8")
    head = _pack_blob(name_b) + struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
    return head + data.astype("<f8").tobytes()


def collect_arrays(state: model.ModelState, bank: bpl.PrototypeBank | None) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, tens in state.named_parameters().items():
        arrays[name] = tens.data
    for name, buf in state.named_buffers().items():
        arrays[name] = buf
    if bank is not None:
        arrays["bank.protos_v"] = bank.protos_v
        arrays["bank.protos_i"] = bank.protos_i
        arrays["bank.initialized_v"] = bank.initialized_v.astype(np.float64)
        arrays["bank.initialized_i"] = bank.initialized_i.astype(np.float64)
        arrays["bank.alpha"] = np.asarray(bank.alpha)
        arrays["bank.iteration"] = np.asarray(float(bank.iteration))
    return arrays


def serialize(config_text: str, arrays: dict[str, np.ndarray]) -> bytes:
    config_b = config_text.encode("utf-8")
    fingerprint = hashlib.sha256(config_b).hexdigest().encode("ascii")
    out = [MAGIC, _pack_blob(config_b), _pack_blob(fingerprint),
           struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        out.append(_tensor_record(name, array))
    return b"".join(out)


def save(path, state: model.ModelState, bank: bpl.PrototypeBank | None,
         config_text: str) -> str:
    """Write the container; returns the config fingerprint."""
    blob = serialize(config_text, collect_arrays(state, bank))
    Path(path).write_bytes(blob)
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


class LoadedCheckpoint:
    def __init__(self, config_text: str, fingerprint: str,
                 arrays: dict[str, np.ndarray]):
        self.config_text = config_text
        self.fingerprint = fingerprint
        self.arrays = arrays


def deserialize(blob: bytes) -> LoadedCheckpoint:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic; not a checkpoint file")
    view = memoryview(blob)
    pos = len(MAGIC)

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def take_blob() -> bytes:
        (length,) = struct.unpack("<I", take(4))
        return bytes(take(length))

    try:
        config_text = take_blob().decode("utf-8")
        fingerprint = take_blob().decode("ascii")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"undecodable header text: {exc}") from exc
    expect = hashlib.sha256(config_text.encode("utf-8")).hexdigest()
    if fingerprint != expect:
        raise CheckpointError("config fingerprint mismatch; file corrupted")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = take_blob().decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        arrays[name] = data
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after records")
    return LoadedCheckpoint(config_text, fingerprint, arrays)


def load_raw(path) -> LoadedCheckpoint:
    return deserialize(Path(path).read_bytes())


def restore(loaded: LoadedCheckpoint, cfg: model.ModelConfig) -> tuple[model.ModelState, bpl.PrototypeBank | None]:
    """Rebuild a model (and bank, if present) from loaded arrays."""
    state = model.build_model(cfg)
    for name, tens in state.named_parameters().items():
        if name not in loaded.arrays:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        stored = loaded.arrays[name]
        if stored.shape != tens.data.shape:
            raise CheckpointError(
                f"parameter {name}: stored shape {stored.shape} != model {tens.data.shape}"
            )
        tens.data = stored.copy()
    for name, buf in state.named_buffers().items():
        if name not in loaded.arrays:
            raise CheckpointError(f"checkpoint missing buffer {name}")
        buf[:] = loaded.arrays[name]
    if "bank.protos_v" not in loaded.arrays:
        return state, None
    protos_v = loaded.arrays["bank.protos_v"]
    bank = bpl.PrototypeBank(
        protos_v=protos_v.copy(),
        protos_i=loaded.arrays["bank.protos_i"].copy(),
        initialized_v=loaded.arrays["bank.initialized_v"] != 0.0,
        initialized_i=loaded.arrays["bank.initialized_i"] != 0.0,
        alpha=float(loaded.arrays["bank.alpha"]),
        iteration=int(loaded.arrays["bank.iteration"]),
    )
    return state, bank
