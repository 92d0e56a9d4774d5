# checkpoint.py
"""
Binary checkpoint of a ParamStore.

Layout: "AGNC", version byte, u32 entry count, then per entry u32 name length,
UTF-8 name, u32 rank, rank x u32 dims and a float32 little-endian payload.
Entries are written in store insertion order so consecutive saves of the same
store are byte-identical. Integers (step counts, integer config values) are
two-element entries holding high and low base-65536 digits, exact in float32.
"""
import struct
from collections import OrderedDict
from typing import Dict, Optional, Union

import numpy as np

from . import diagnostics
from .errors import FormatError
from .tensor_core import ParamStore

CHECKPOINT_MAGIC = b"AGNC"
CHECKPOINT_VERSION = 1
METADATA_PREFIX = "config."

_HEADER = struct.Struct("<4sBI")
_U32 = struct.Struct("<I")
# integers travel as [high, low] base-65536 digits; both stay exact in float32 while |value| < 2**40
_INT_BASE = 1 << 16
_INT_HIGH_LIMIT = 1 << 24


def encode_int(value: int) -> np.ndarray:
    high, low = divmod(int(value), _INT_BASE)
    if abs(high) >= _INT_HIGH_LIMIT:
        raise FormatError(f"integer {value} does not fit a checkpoint entry")
    return np.array([high, low], dtype=np.float64)


def decode_int(array: np.ndarray) -> int:
    high, low = (int(v) for v in np.asarray(array).ravel())
    return high * _INT_BASE + low


def store_entries(store: ParamStore, metadata: Optional[Dict[str, Union[int, float]]] = None,
                  optimizer: bool = True) -> "OrderedDict[str, np.ndarray]":
    """
    Flatten a store into named arrays: weights, bias, Adam moments, BN statistics, step counts.

    Integer metadata values and step counts use the two-digit integer encoding;
    float metadata values are single-element entries.
    """
    entries = OrderedDict()
    for key, value in (metadata or {}).items():
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            entries[f"{METADATA_PREFIX}{key}"] = encode_int(value)
        else:
            entries[f"{METADATA_PREFIX}{key}"] = np.array([value], dtype=np.float64)
    for layer in store:
        for slot, tensor in layer.tensors():
            name = f"{layer.name}.{slot}"
            entries[name] = tensor.data
            if optimizer:
                entries[f"{name}.m"] = tensor.adam_m
                entries[f"{name}.v"] = tensor.adam_v
        if layer.running_mean is not None:
            entries[f"{layer.name}.running_mean"] = layer.running_mean
            entries[f"{layer.name}.running_var"] = layer.running_var
        if optimizer:
            entries[f"{layer.name}.step"] = encode_int(layer.step_count)
    return entries


def save_checkpoint(store: ParamStore, path: str, metadata: Optional[Dict[str, Union[int, float]]] = None):
    entries = store_entries(store, metadata)
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))]
    for name, value in entries.items():
        encoded = name.encode("utf-8")
        array = np.asarray(value)
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    diagnostics.log(f"checkpoint saved: {path} ({len(entries)} entries)")


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    """Read every entry as a float32 array, in file order."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {_HEADER.size} bytes)")
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")

    def take(offset, size, what):
        if offset + size > len(raw):
            raise FormatError(f"{path}: truncated while reading {what}")
        return raw[offset:offset + size], offset + size

    entries = OrderedDict()
    offset = _HEADER.size
    for index in range(count):
        chunk, offset = take(offset, 4, f"name length of entry {index}")
        (name_len,) = _U32.unpack(chunk)
        chunk, offset = take(offset, name_len, f"name of entry {index}")
        try:
            name = chunk.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: entry {index} name is not UTF-8") from e
        if name in entries:
            raise FormatError(f"{path}: duplicate entry '{name}'")
        chunk, offset = take(offset, 4, f"rank of '{name}'")
        (rank,) = _U32.unpack(chunk)
        chunk, offset = take(offset, 4 * rank, f"dims of '{name}'")
        dims = struct.unpack(f"<{rank}I", chunk)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        chunk, offset = take(offset, 4 * size, f"payload of '{name}'")
        entries[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(dims)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after {count} entries")
    return entries


def read_metadata(entries: Dict[str, np.ndarray]) -> Dict[str, Union[int, float]]:
    """config.<key> entries: two-digit entries as exact ints, the rest as floats rounded back to 7 significant digits."""
    meta = {}
    for name, value in entries.items():
        if not name.startswith(METADATA_PREFIX):
            continue
        key = name[len(METADATA_PREFIX):]
        if value.size == 2:
            meta[key] = decode_int(value)
        elif value.size == 1:
            meta[key] = float(f"{float(value.ravel()[0]):.7g}")
        else:
            raise FormatError(f"config entry '{name}' has {value.size} values")
    return meta


def restore_store(store: ParamStore, entries: Dict[str, np.ndarray], prefix: str = "", optimizer: bool = True):
    """
    Copy checkpoint entries into the layers whose names start with prefix.

    Every expected entry must be present with the same shape, and every
    checkpoint entry under the prefix must have a counterpart in the store.
    The first offending name is reported. With optimizer=False the Adam
    moments and step counts are neither required nor restored.
    """
    expected = OrderedDict(
        (name, value) for name, value in store_entries(store, optimizer=optimizer).items()
        if name.startswith(prefix)
    )
    for name, value in expected.items():
        if name not in entries:
            raise FormatError(f"parameter '{name}' missing from checkpoint")
        if tuple(entries[name].shape) != tuple(np.shape(value)):
            raise FormatError(
                f"parameter '{name}': checkpoint shape {tuple(entries[name].shape)} "
                f"does not match model shape {tuple(np.shape(value))}"
            )
    optimizer_suffixes = (".m", ".v", ".step")
    for name in entries:
        if name.startswith(METADATA_PREFIX) or not name.startswith(prefix) or name in expected:
            continue
        if not optimizer and name.endswith(optimizer_suffixes):
            continue
        raise FormatError(f"checkpoint parameter '{name}' has no counterpart in the model")

    for layer in store:
        if not layer.name.startswith(prefix):
            continue
        for slot, tensor in layer.tensors():
            name = f"{layer.name}.{slot}"
            tensor.data[...] = entries[name]
            if optimizer:
                tensor.adam_m[...] = entries[f"{name}.m"]
                tensor.adam_v[...] = entries[f"{name}.v"]
        if layer.running_mean is not None:
            layer.running_mean[...] = entries[f"{layer.name}.running_mean"]
            layer.running_var[...] = entries[f"{layer.name}.running_var"]
        if optimizer:
            layer.step_count = decode_int(entries[f"{layer.name}.step"])
