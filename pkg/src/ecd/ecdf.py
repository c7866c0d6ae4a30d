"""ECDF binary tensor files.

Layout: magic ``ECDF``, version u32 (=1), dtype u8 (0 = float32,
1 = float64), ndim u8, then ndim dims as u32, then the raw little-endian
payload in C order (channel-major, row-major for feature maps).

A parameter container is a directory holding one .ecdf file per named
block plus a ``manifest.json`` mapping block name -> file name.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECDF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<IBB", VERSION, _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 10)
    offset = 10 + 4 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size {len(raw)} != expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_container(directory, blocks: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in blocks.items():
        fname = name.replace("/", "__") + ".ecdf"
        write_tensor(directory / fname, arr)
        manifest[name] = fname
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_container(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return {name: read_tensor(directory / fname) for name, fname in manifest.items()}
