"""Binary file formats: OCPC point clouds, OCGR occupancy grids, OCWT checkpoints, PPM images.

All integers and floats are little-endian.  Readers raise ``FormatError``
carrying the file name and the byte offset where parsing failed.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .head import OccGrid
from .pointcloud import PointCloud

VERSION = 1


class FormatError(ValueError):
    def __init__(self, source: str, offset: int, message: str):
        super().__init__(f"{source}: byte {offset}: {message}")
        self.source = source
        self.offset = offset


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.pos = 0

    def fail(self, message: str, offset: int | None = None):
        raise FormatError(self.source, self.pos if offset is None else offset, message)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))
        return vals if len(vals) > 1 else vals[0]

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            self.fail(f"bad magic {got!r}, expected {expected!r}", 0)

    def version(self) -> None:
        start = self.pos
        v = self.unpack("I", "version")
        if v != VERSION:
            self.fail(f"unsupported version {v}", start)

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize, what), dtype=dt).copy()

    def end(self) -> None:
        if self.pos != len(self.data):
            self.fail(f"{len(self.data) - self.pos} trailing bytes")


def _read(path) -> _Reader:
    return _Reader(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- OCPC


def encode_pointcloud(cloud: PointCloud) -> bytes:
    pos = np.asarray(cloud.positions, dtype=np.float64).reshape(-1, 3)
    feats = cloud.feature_array()
    feats = feats.reshape(len(pos), feats.shape[-1] if feats.ndim == 2 else -1)
    rows = np.concatenate([pos, feats], axis=1).astype("<f4")
    return b"OCPC" + struct.pack("<III", VERSION, len(pos), feats.shape[1]) + rows.tobytes()


def decode_pointcloud(data: bytes, source: str = "<ocpc>") -> PointCloud:
    r = _Reader(data, source)
    r.magic(b"OCPC")
    r.version()
    n, c = r.unpack("II", "header")
    rows = r.array("<f4", n * (3 + c), "point data").reshape(n, 3 + c).astype(np.float64)
    r.end()
    return PointCloud(rows[:, :3], rows[:, 3:])


def write_pointcloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_pointcloud(cloud))


def read_pointcloud(path) -> PointCloud:
    return decode_pointcloud(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- OCGR


def encode_grid(grid: OccGrid) -> bytes:
    x, y, z = grid.shape
    head = b"OCGR" + struct.pack("<IIIIB", VERSION, x, y, z, grid.num_classes)
    return head + np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes()


def decode_grid(data: bytes, source: str = "<ocgr>") -> OccGrid:
    r = _Reader(data, source)
    r.magic(b"OCGR")
    r.version()
    x, y, z = r.unpack("III", "extents")
    classes = r.unpack("B", "class count")
    start = r.pos
    labels = r.array("u1", x * y * z, "labels")
    r.end()
    if labels.size and labels.max() > classes:
        bad = int(np.argmax(labels > classes))
        raise FormatError(source, start + bad, f"label {labels[bad]} exceeds class count {classes}")
    return OccGrid(labels.reshape(x, y, z), classes)


def write_grid(path, grid: OccGrid) -> None:
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path) -> OccGrid:
    return decode_grid(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- OCWT


def encode_weights(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [b"OCWT", struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_weights(data: bytes, source: str = "<ocwt>") -> "OrderedDict[str, np.ndarray]":
    r = _Reader(data, source)
    r.magic(b"OCWT")
    r.version()
    count = r.unpack("I", "parameter count")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        start = r.pos
        n = r.unpack("H", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            r.fail("parameter name is not UTF-8", start + 2)
        if name in out:
            r.fail(f"duplicate parameter {name!r}", start)
        rank = r.unpack("B", "rank")
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank, "extents")))
        out[name] = r.array("<f8", int(np.prod(shape, dtype=np.int64)), f"data of {name!r}").reshape(shape).astype(np.float64)
    r.end()
    return out


def write_weights(path, arrays) -> None:
    Path(path).write_bytes(encode_weights(arrays))


def read_weights(path) -> "OrderedDict[str, np.ndarray]":
    return decode_weights(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- PPM


def encode_ppm(image: np.ndarray) -> bytes:
    """(3, H, W) uint8 -> binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise ValueError(f"encode_ppm: expected (3, H, W) uint8, got {img.shape} {img.dtype}")
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes()


def decode_ppm(data: bytes, source: str = "<ppm>") -> np.ndarray:
    r = _Reader(data, source)
    r.magic(b"P6")
    fields = []
    while len(fields) < 3:
        while r.pos < len(data) and data[r.pos : r.pos + 1].isspace():
            r.pos += 1
        if data[r.pos : r.pos + 1] == b"#":
            while r.pos < len(data) and data[r.pos : r.pos + 1] != b"\n":
                r.pos += 1
            continue
        start = r.pos
        while r.pos < len(data) and data[r.pos : r.pos + 1].isdigit():
            r.pos += 1
        if r.pos == start:
            r.fail("expected an integer in the PPM header")
        fields.append(int(data[start : r.pos]))
    w, h, maxval = fields
    if maxval != 255:
        r.fail(f"unsupported maxval {maxval}")
    r.take(1, "header terminator")
    pix = r.array("u1", w * h * 3, "pixels")
    r.end()
    return pix.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), str(path))
