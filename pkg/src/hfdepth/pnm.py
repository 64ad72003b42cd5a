"""Minimal PPM (P6), PGM (P5) and PFM (Pf) readers and writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _read_header(data: bytes, path, ntokens: int):
    """Parse whitespace-separated header tokens; returns (tokens, payload offset)."""
    tokens, pos = [], 0
    while len(tokens) < ntokens:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at offset {pos}")
        tokens.append(data[start:pos].decode("ascii"))
    # exactly one whitespace byte separates header and payload
    return tokens, pos + 1


def _payload(data, offset, nbytes, path, field):
    if len(data) - offset < nbytes:
        raise FormatError(
            f"{path}: truncated {field}: expected {nbytes} bytes at offset {offset}, found {len(data) - offset}"
        )
    if len(data) - offset > nbytes:
        raise FormatError(f"{path}: {len(data) - offset - nbytes} unexpected trailing bytes after {field}")
    return data[offset : offset + nbytes]


def write_ppm(path, rgb) -> None:
    """Write an (h, w, 3) array in [0, 1] as 8-bit binary PPM."""
    rgb = np.asarray(rgb)
    h, w, _ = rgb.shape
    raw = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _read_header(data, path, 4)
    if magic != "P6":
        raise FormatError(f"{path}: expected P6 magic, got {magic!r}")
    if maxval != "255":
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    w, h = int(w), int(h)
    raw = _payload(data, off, w * h * 3, path, "pixel data")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) / np.float32(255.0)).astype(np.float32)


def write_pgm(path, mask) -> None:
    """Write a boolean mask as 8-bit PGM (0 / 255)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + (mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _read_header(data, path, 4)
    if magic != "P5":
        raise FormatError(f"{path}: expected P5 magic, got {magic!r}")
    if int(maxval) > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    w, h = int(w), int(h)
    raw = _payload(data, off, w * h, path, "pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w) > 0


def write_pfm(path, img) -> None:
    """Write a single-channel float map as little-endian PFM (rows bottom-up)."""
    img = np.asarray(img)
    h, w = img.shape
    body = np.ascontiguousarray(np.flipud(img), dtype="<f4").tobytes()
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + body)


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, scale), off = _read_header(data, path, 4)
    if magic != "Pf":
        raise FormatError(f"{path}: expected single-channel Pf magic, got {magic!r}")
    w, h, scale = int(w), int(h), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    raw = _payload(data, off, w * h * 4, path, "float data")
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float32)
