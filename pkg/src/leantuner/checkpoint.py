"""Tensor checkpoint container.

Layout, bit-exact and deliberately simple:

    [8 bytes]  little-endian u64: byte length N of the header
    [N bytes]  UTF-8 JSON: {tensor_name: {"dtype", "shape", "data_offsets"},
               ..., "__metadata__": {str: str}} where data_offsets are
               [begin, end) relative to the start of the data region
    [rest]     raw little-endian tensor bytes, row-major

Saving writes tensors in lexicographic name order with a compact,
key-sorted JSON header, so identical tensor dicts always produce identical
bytes; save(load(f)) == f for files this engine wrote. Pickle-based ".bin"
checkpoints are refused outright rather than parsed.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import BadHeader, BadMagic, MissingTensor, ShapeMismatch

_DTYPES = {"F32": np.dtype("<f4"), "I64": np.dtype("<i8")}
_DTYPE_NAMES = {np.dtype(np.float32): "F32", np.dtype(np.int64): "I64"}

# A header longer than this is taken as a corrupt length prefix rather than
# a legitimately enormous tensor table.
_MAX_HEADER_BYTES = 64 * 1024 * 1024


def _dtype_name(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("=")
    name = _DTYPE_NAMES.get(np.dtype(key))
    if name is None:
        raise ShapeMismatch(f"unsupported checkpoint dtype {arr.dtype}")
    return name


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write name->ndarray in the container layout described above."""
    names = sorted(tensors)
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        dtype = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(payload).to_bytes(8, "little"))
        f.write(payload)
        for raw in blobs:
            f.write(raw)
        f.flush()
        os.fsync(f.fileno())


def load_tensors(path) -> tuple:
    """Read a container; returns (tensors, metadata).

    Raises BadMagic when the length prefix cannot be right for the file,
    BadHeader when the header fails to parse or describes impossible
    offsets. Never unpickles anything.
    """
    if str(path).endswith(".bin"):
        raise BadHeader(
            f"{path}: refusing pickle checkpoint; use the tensor container format"
        )
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise BadMagic(f"{path}: shorter than the 8-byte length prefix")
    header_len = int.from_bytes(blob[:8], "little")
    if header_len == 0 or header_len > min(len(blob) - 8, _MAX_HEADER_BYTES):
        raise BadMagic(f"{path}: impossible header length {header_len}")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadHeader(f"{path}: header is not valid JSON ({e})") from None
    if not isinstance(header, dict):
        raise BadHeader(f"{path}: header must be a JSON object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict):
        raise BadHeader(f"{path}: __metadata__ must be an object")
    data = blob[8 + header_len :]
    tensors = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= set(
            entry
        ):
            raise BadHeader(f"{path}: malformed entry for {name!r}")
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise BadHeader(f"{path}: unsupported dtype {entry['dtype']!r} for {name!r}")
        shape = entry["shape"]
        offsets = entry["data_offsets"]
        if (
            not isinstance(shape, list)
            or not all(isinstance(n, int) and n >= 0 for n in shape)
            or not isinstance(offsets, list)
            or len(offsets) != 2
        ):
            raise BadHeader(f"{path}: malformed shape or offsets for {name!r}")
        begin, end = offsets
        if not (0 <= begin <= end <= len(data)):
            raise BadHeader(f"{path}: offsets {offsets} outside data region for {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count * dtype.itemsize != end - begin:
            raise BadHeader(f"{path}: size mismatch for {name!r}")
        arr = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, {str(k): str(v) for k, v in metadata.items()}


def take_tensor(tensors: dict, name: str, shape: tuple, path="checkpoint") -> np.ndarray:
    """Fetch one named tensor, insisting on its shape."""
    if name not in tensors:
        raise MissingTensor(f"{path}: missing tensor {name!r}")
    arr = tensors[name]
    if tuple(arr.shape) != tuple(shape):
        raise ShapeMismatch(
            f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}"
        )
    return arr
