"""Binary file formats shared across the pipeline.

All formats are little-endian with a 4-byte ASCII magic:

* ``FSGR`` -- raw float32 gradient image (16-byte header).
* ``FSAF`` -- per-segment feature vectors.
* ``FSMH`` -- embedding-head weight checkpoint.
* ``FSRL`` -- per-segment pixel run-lengths over the row-major flat index.

Segment identity is the FNV-1a 64-bit hash of the image id and the
segment's sorted run-length encoding, so keys survive session reloads.
"""

from __future__ import annotations

import struct

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """Raised when a binary file does not match its declared format."""


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _U64_MASK
    return h


def segment_key(image_id: str, runs) -> int:
    """Stable 64-bit id for a segment.

    ``runs`` is an iterable of (start, length) pairs over the row-major
    flat pixel index; they are sorted by start before hashing so the key
    does not depend on construction order.
    """
    blob = bytearray(image_id.encode("utf-8"))
    blob.append(0)
    for start, length in sorted((int(s), int(n)) for s, n in runs):
        blob += struct.pack("<II", start, length)
    return fnv1a64(bytes(blob))


def mask_to_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Run-length encode a boolean mask over its row-major flat index."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    ends = edges[1::2]
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def runs_to_mask(runs, shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in runs:
        flat[start : start + length] = True
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# FSGR -- raw gradient image
# ---------------------------------------------------------------------------

def write_gradient(path, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("gradient must be a 2D array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"FSGR" + struct.pack("<III", 1, w, h))
        f.write(arr.tobytes())


def read_gradient_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != b"FSGR":
            raise FormatError(f"{path}: not an FSGR gradient file")
        version, w, h = struct.unpack("<III", header[4:])
        if version != 1:
            raise FormatError(f"{path}: unsupported FSGR version {version}")
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise FormatError(f"{path}: truncated FSGR payload")
    return data.reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# FSAF -- feature vectors
# ---------------------------------------------------------------------------

def write_features(path, features: dict[int, np.ndarray]) -> None:
    """Write a key -> vector mapping. Records are sorted by key."""
    keys = sorted(features)
    dim = 0
    if keys:
        dim = int(np.asarray(features[keys[0]]).shape[0])
    with open(path, "wb") as f:
        f.write(b"FSAF" + struct.pack("<III", 1, len(keys), dim))
        for key in keys:
            vec = np.ascontiguousarray(features[key], dtype="<f4")
            if vec.shape != (dim,):
                raise ValueError(f"feature dimension mismatch for key {key}")
            f.write(struct.pack("<Q", key))
            f.write(vec.tobytes())


def read_features(path) -> dict[int, np.ndarray]:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != b"FSAF":
            raise FormatError(f"{path}: not an FSAF feature file")
        version, count, dim = struct.unpack("<III", header[4:])
        if version != 1:
            raise FormatError(f"{path}: unsupported FSAF version {version}")
        out = {}
        for _ in range(count):
            raw = f.read(8 + 4 * dim)
            if len(raw) != 8 + 4 * dim:
                raise FormatError(f"{path}: truncated FSAF record")
            (key,) = struct.unpack("<Q", raw[:8])
            out[key] = np.frombuffer(raw[8:], dtype="<f4").astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# FSMH -- embedding head checkpoint
# ---------------------------------------------------------------------------

def write_head(path, weights: np.ndarray) -> None:
    arr = np.ascontiguousarray(weights, dtype="<f4")
    d_in, d_emb = arr.shape
    with open(path, "wb") as f:
        f.write(b"FSMH" + struct.pack("<III", 1, d_in, d_emb))
        f.write(arr.tobytes())


def read_head(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != b"FSMH":
            raise FormatError(f"{path}: not an FSMH head file")
        version, d_in, d_emb = struct.unpack("<III", header[4:])
        if version != 1:
            raise FormatError(f"{path}: unsupported FSMH version {version}")
        data = np.frombuffer(f.read(4 * d_in * d_emb), dtype="<f4")
    if data.size != d_in * d_emb:
        raise FormatError(f"{path}: truncated FSMH payload")
    return data.reshape(d_in, d_emb).astype(np.float64)


# ---------------------------------------------------------------------------
# FSRL -- segment run-lengths
# ---------------------------------------------------------------------------

def write_runs(path, runs_by_key: dict[int, list[tuple[int, int]]]) -> None:
    with open(path, "wb") as f:
        f.write(b"FSRL" + struct.pack("<I", 1))
        for key in sorted(runs_by_key):
            runs = runs_by_key[key]
            f.write(struct.pack("<QI", key, len(runs)))
            for start, length in runs:
                f.write(struct.pack("<II", start, length))


def read_runs(path) -> dict[int, list[tuple[int, int]]]:
    out: dict[int, list[tuple[int, int]]] = {}
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8 or header[:4] != b"FSRL":
            raise FormatError(f"{path}: not an FSRL run-length file")
        (version,) = struct.unpack("<I", header[4:])
        if version != 1:
            raise FormatError(f"{path}: unsupported FSRL version {version}")
        while True:
            rec = f.read(12)
            if not rec:
                break
            if len(rec) != 12:
                raise FormatError(f"{path}: truncated FSRL record header")
            key, n_runs = struct.unpack("<QI", rec)
            body = f.read(8 * n_runs)
            if len(body) != 8 * n_runs:
                raise FormatError(f"{path}: truncated FSRL runs for key {key}")
            pairs = struct.unpack(f"<{2 * n_runs}I", body) if n_runs else ()
            out[key] = [(pairs[2 * i], pairs[2 * i + 1]) for i in range(n_runs)]
    return out
