"""Minimal binary volume format ("JNV1") plus CSV helpers.

Layout, all little-endian::

    offset 0   4 bytes   magic b"JNV1"
    offset 4   1 byte    kind (0 image, 1 label, 2 confidence, 3 supervision)
    offset 5   3 x u32   dims (d, h, w)
    offset 17  u32       class count (0 unless kind is label)
    offset 21  payload   row-major (d, h, w); float32 for image/confidence, uint8 otherwise
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"JNV1"
HEADER = struct.Struct("<4sB3II")
PAYLOAD_OFFSET = HEADER.size


class Kind(IntEnum):
    IMAGE = 0
    LABEL = 1
    CONFIDENCE = 2
    SUPERVISION = 3

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("<f4") if self in (Kind.IMAGE, Kind.CONFIDENCE) else np.dtype("u1")


class FormatError(ValueError):
    """Malformed volume file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class VolumeFile:
    kind: Kind
    data: np.ndarray  # (d, h, w) in the on-disk dtype
    class_count: int = 0


def _first_bad(mask: np.ndarray, itemsize: int) -> int:
    return PAYLOAD_OFFSET + int(np.flatnonzero(mask.ravel())[0]) * itemsize


def _validate(vf: VolumeFile) -> None:
    data, kind = vf.data, vf.kind
    size = kind.dtype.itemsize
    if kind is Kind.IMAGE and not np.isfinite(data).all():
        raise FormatError("non-finite image value", _first_bad(~np.isfinite(data), size))
    if kind is Kind.CONFIDENCE:
        bad = ~((data >= 0) & (data <= 1))
        if bad.any():
            raise FormatError("confidence outside [0, 1]", _first_bad(bad, size))
    if kind is Kind.LABEL:
        if vf.class_count < 1:
            raise FormatError("label file needs a positive class count", 17)
        if (data >= vf.class_count).any():
            raise FormatError(f"label value >= class count {vf.class_count}",
                              _first_bad(data >= vf.class_count, size))
    if kind is Kind.SUPERVISION and (data > 1).any():
        raise FormatError("supervision value other than 0/1", _first_bad(data > 1, size))


def make_volume(grid, kind: Kind | int, class_count: int = 0) -> VolumeFile:
    """Convert an in-memory grid to its on-disk representation, checking the value domain."""
    kind = Kind(kind)
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"volume files hold 3-d grids, got shape {grid.shape}")
    if kind.dtype.kind == "u":
        if grid.size and (grid.min() < 0 or grid.max() > 255 or not np.array_equal(grid, np.round(grid))):
            raise ValueError(f"{kind.name.lower()} values must be integers in 0..255")
    data = np.ascontiguousarray(grid, dtype=kind.dtype)
    vf = VolumeFile(kind, data, int(class_count) if kind is Kind.LABEL else 0)
    _validate(vf)
    return vf


def encode(vf: VolumeFile) -> bytes:
    d, h, w = vf.data.shape
    header = HEADER.pack(MAGIC, int(vf.kind), d, h, w, vf.class_count)
    return header + np.ascontiguousarray(vf.data, dtype=vf.kind.dtype).tobytes()


def decode(buf: bytes) -> VolumeFile:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    if len(buf) < PAYLOAD_OFFSET:
        raise FormatError("truncated header", len(buf))
    _, kind, d, h, w, classes = HEADER.unpack_from(buf)
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"unknown kind byte {kind}", 4) from None
    if min(d, h, w) < 1:
        raise FormatError(f"zero-sized dims {(d, h, w)}", 5)
    need = d * h * w * kind.dtype.itemsize
    have = len(buf) - PAYLOAD_OFFSET
    if have < need:
        raise FormatError(f"truncated payload: {have} of {need} bytes", PAYLOAD_OFFSET + have)
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", PAYLOAD_OFFSET + need)
    data = np.frombuffer(buf, dtype=kind.dtype, offset=PAYLOAD_OFFSET).reshape(d, h, w).copy()
    vf = VolumeFile(kind, data, classes if kind is Kind.LABEL else 0)
    if kind is not Kind.LABEL and classes:
        raise FormatError(f"class count {classes} on a {kind.name.lower()} file", 17)
    _validate(vf)
    return vf


def atomic_write(path, payload: bytes | str) -> None:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(path, grid, kind: Kind | int, class_count: int = 0) -> VolumeFile:
    vf = make_volume(grid, kind, class_count)
    atomic_write(path, encode(vf))
    return vf


def read_volume(path) -> VolumeFile:
    with open(path, "rb") as fh:
        return decode(fh.read())


def to_raw(vf: VolumeFile) -> bytes:
    """Bare payload bytes, for tools that read flat arrays."""
    return encode(vf)[PAYLOAD_OFFSET:]


def from_raw(raw: bytes, dims, kind: Kind | int, class_count: int = 0) -> VolumeFile:
    kind = Kind(kind)
    d, h, w = (int(x) for x in dims)
    return decode(HEADER.pack(MAGIC, int(kind), d, h, w, class_count if kind is Kind.LABEL else 0) + raw)


def format_cell(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def csv_text(columns, rows) -> str:
    """CSV with the given column order; floats rendered with six decimals."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_cell(row[c]) for c in columns])
    return out.getvalue()
