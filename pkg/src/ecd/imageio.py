"""Binary PPM/PGM image IO (zero-dependency formats used by the synthetic world)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, img: np.ndarray) -> None:
    """Write an RGB image. Accepts (3, H, W) float in [0, 1] or (H, W, 3) uint8."""
    if img.ndim == 3 and img.shape[0] == 3 and img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = img.shape
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into (3, H, W) float32 in [0, 1]."""
    data = Path(path).read_bytes()
    magic, w, h, maxval, offset = _parse_header(data)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    arr = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=offset)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a binary mask as PGM P5 (255 = change, 0 = no change)."""
    gray = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM into a boolean mask (nonzero = change)."""
    data = Path(path).read_bytes()
    magic, w, h, _maxval, offset = _parse_header(data)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    arr = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset)
    return arr.reshape(h, w) > 0


def _parse_header(data: bytes):
    # magic, width, height, maxval separated by whitespace; then one byte
    fields = []
    i = 0
    while len(fields) < 4:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while data[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not data[j : j + 1].isspace():
            j += 1
        fields.append(data[i:j])
        i = j
    i += 1  # single whitespace after maxval
    return fields[0], int(fields[1]), int(fields[2]), int(fields[3]), i
