"""Little-endian binary containers for features, labels, graphs and codes.

Layouts (all integers little-endian)::

    SSVH-FEAT  magic[9] version:u32 n:u64 M:u64 D:u64 dtype:4s("f32\\0")
               then n*M*D float32, row-major (video, frame, dim)
    SSVH-LABL  magic[9] n:u64 then n uint32 labels
    SSVH-NBRG  magic[9] n:u64 then per video: count:u32, count ascending uint32 indices
    SSVH-CODE  magic[9] version:u32 n:u64 L:u64 then n records of ceil(L/8) bytes
               (bit k of a code lives in byte k//8 at bit k%8; +1 -> 1)

Checkpoints (``SSVH-CKPT``) are handled in :mod:`seqhash.trainer`.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, MagicMismatch, VersionMismatch

FEAT_MAGIC = b"SSVH-FEAT"
LABL_MAGIC = b"SSVH-LABL"
NBRG_MAGIC = b"SSVH-NBRG"
CODE_MAGIC = b"SSVH-CODE"
CKPT_MAGIC = b"SSVH-CKPT"
MAGIC_LEN = 9

FEAT_VERSION = 1
CODE_VERSION = 1
F32_TAG = b"f32\x00"


class Reader:
    """Cursor over an in-memory file with structured errors on short reads."""

    def __init__(self, data: bytes, path="<bytes>"):
        self.data = data
        self.pos = 0
        self.path = str(path)

    def take(self, size: int) -> bytes:
        if size < 0 or self.pos + size > len(self.data):
            raise CorruptFile(f"{self.path}: truncated (need {size} bytes at offset {self.pos}, file has {len(self.data)})")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).copy()

    def expect_magic(self, magic: bytes):
        got = self.data[:MAGIC_LEN]
        if got != magic:
            raise MagicMismatch(f"{self.path}: expected {magic.decode()} file, found magic {got!r}")
        self.pos = MAGIC_LEN

    def expect_version(self, supported: int):
        (version,) = self.unpack("I")
        if version != supported:
            raise VersionMismatch(f"{self.path}: format version {version}, this build reads {supported}")
        return version

    def finish(self):
        if self.pos != len(self.data):
            raise CorruptFile(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def _open(path, magic) -> Reader:
    r = Reader(Path(path).read_bytes(), path)
    r.expect_magic(magic)
    return r


# -- features -----------------------------------------------------------------


def write_features(features, path):
    x = np.asarray(features)
    if x.ndim != 3:
        raise ValueError(f"features must be (n, M, D), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    n, M, D = x.shape
    header = FEAT_MAGIC + struct.pack("<IQQQ4s", FEAT_VERSION, n, M, D, F32_TAG)
    Path(path).write_bytes(header + np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Load a feature file, widened to float64."""
    r = _open(path, FEAT_MAGIC)
    r.expect_version(FEAT_VERSION)
    n, M, D, tag = r.unpack("QQQ4s")
    if tag != F32_TAG:
        raise CorruptFile(f"{path}: unsupported dtype tag {tag!r}")
    expected = n * M * D * 4
    if len(r.data) - r.pos != expected:
        raise CorruptFile(f"{path}: header declares {n}x{M}x{D} floats ({expected} bytes), payload has {len(r.data) - r.pos}")
    x = r.array("f4", n * M * D).reshape(n, M, D)
    if not np.all(np.isfinite(x)):
        raise CorruptFile(f"{path}: non-finite feature values")
    return x.astype(np.float64)


# -- labels -------------------------------------------------------------------


def write_labels(labels, path):
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF)):
        raise ValueError("labels must be a 1-d array of uint32 values")
    Path(path).write_bytes(LABL_MAGIC + struct.pack("<Q", labels.size) + labels.astype("<u4").tobytes())


def read_labels(path) -> np.ndarray:
    r = _open(path, LABL_MAGIC)
    (n,) = r.unpack("Q")
    if len(r.data) - r.pos != 4 * n:
        raise CorruptFile(f"{path}: header declares {n} labels, payload has {len(r.data) - r.pos} bytes")
    return r.array("u4", n).astype(np.int64)


# -- neighbor graph -----------------------------------------------------------


def write_graph(graph, path):
    parts = [NBRG_MAGIC, struct.pack("<Q", graph.n)]
    for nb in graph.neighbors:
        nb = np.asarray(nb, dtype=np.int64)
        parts.append(struct.pack("<I", nb.size))
        parts.append(nb.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_graph(path):
    from .neighborhood import NeighborGraph

    r = _open(path, NBRG_MAGIC)
    (n,) = r.unpack("Q")
    neighbors = []
    for i in range(n):
        (count,) = r.unpack("I")
        nb = r.array("u4", count).astype(np.int64)
        if count and (np.any(np.diff(nb) <= 0) or nb[-1] >= n):
            raise CorruptFile(f"{path}: neighbor list {i} is not strictly ascending within [0, {n})")
        neighbors.append(nb)
    r.finish()
    return NeighborGraph(n, neighbors)


# -- codes --------------------------------------------------------------------


def write_codes(db, path):
    header = CODE_MAGIC + struct.pack("<IQQ", CODE_VERSION, db.n, db.code_len)
    Path(path).write_bytes(header + np.ascontiguousarray(db.packed, dtype=np.uint8).tobytes())


def read_codes(path, labels=None):
    from .retrieval import RetrievalDB

    r = _open(path, CODE_MAGIC)
    r.expect_version(CODE_VERSION)
    n, L = r.unpack("QQ")
    width = (L + 7) // 8
    if len(r.data) - r.pos != n * width:
        raise CorruptFile(f"{path}: header declares {n} codes of {width} bytes, payload has {len(r.data) - r.pos}")
    packed = r.array("u1", n * width).reshape(n, width)
    return RetrievalDB(packed, int(L), labels)
