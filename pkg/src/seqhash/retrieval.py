"""Packed binary codes, Hamming ranking, and AP@K / mAP@K evaluation."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

DEFAULT_KS = (5, 10, 20, 40, 60, 80, 100)


def _check_symbols(codes):
    codes = np.asarray(codes)
    if not np.all((codes == 1) | (codes == -1)):
        raise ValueError("codes must contain only -1 and +1")
    return codes


def pack_codes(codes) -> np.ndarray:
    """Pack +-1 codes into bytes, +1 -> bit 1, least-significant bit first.

    ``(L,) -> (ceil(L/8),)`` and ``(n, L) -> (n, ceil(L/8))``.
    """
    codes = _check_symbols(codes)
    return np.packbits(codes > 0, axis=-1, bitorder="little")


def unpack_codes(packed, code_len: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.shape[-1] != (code_len + 7) // 8:
        raise ShapeError(f"unpack_codes: {code_len} bits need {(code_len + 7) // 8} bytes", packed.shape)
    bits = np.unpackbits(packed, axis=-1, count=code_len, bitorder="little")
    return np.where(bits == 1, 1, -1).astype(np.int8)


def hamming_distance(a, b) -> int:
    """Number of positions where two +-1 codes differ (XOR + popcount on packed bytes)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("hamming_distance: code lengths differ", a.shape, b.shape)
    pa, pb = pack_codes(a), pack_codes(b)
    return int(kernels.hamming_scan(pa[None, :], pb)[0])


@dataclass(frozen=True)
class RetrievalDB:
    """Immutable packed code table with optional integer labels."""

    packed: np.ndarray  # (n, ceil(L/8)) uint8
    code_len: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        packed = np.ascontiguousarray(self.packed, dtype=np.uint8)
        if packed.ndim != 2 or packed.shape[1] != (self.code_len + 7) // 8:
            raise ShapeError(f"RetrievalDB: rows must hold {self.code_len} bits", packed.shape)
        packed.setflags(write=False)
        object.__setattr__(self, "packed", packed)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (packed.shape[0],):
                raise ShapeError("RetrievalDB: one label per code", labels.shape, packed.shape)
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @classmethod
    def from_codes(cls, codes, labels=None):
        codes = np.asarray(codes)
        if codes.ndim != 2:
            raise ShapeError("from_codes: expected (n, L) codes", codes.shape)
        return cls(pack_codes(codes), codes.shape[1], labels)

    @property
    def n(self) -> int:
        return self.packed.shape[0]

    def __len__(self):
        return self.n

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.code_len)

    def with_labels(self, labels):
        return RetrievalDB(self.packed, self.code_len, labels)


class RankedList(NamedTuple):
    indices: np.ndarray
    distances: np.ndarray


def rank(query, db: RetrievalDB, exclude: int | None = None) -> RankedList:
    """Database indices by ascending Hamming distance, ties by ascending index."""
    query = np.asarray(query)
    if query.shape != (db.code_len,):
        raise ShapeError("rank: query length must equal database code length", query.shape, (db.code_len,))
    dist = kernels.hamming_scan(db.packed, pack_codes(query))
    return _rank_from_distances(dist, exclude)


def rank_packed(qpacked, db: RetrievalDB, exclude: int | None = None) -> RankedList:
    dist = kernels.hamming_scan(db.packed, np.ascontiguousarray(qpacked, dtype=np.uint8))
    return _rank_from_distances(dist, exclude)


def _rank_from_distances(dist, exclude):
    n = dist.shape[0]
    order = np.argsort(dist, kind="stable")
    if exclude is not None:
        if not 0 <= exclude < n:
            raise IndexError(f"exclude index {exclude} outside database of size {n}")
        order = order[order != exclude]
    return RankedList(order, dist[order])


def ap_at_k(relevance, R: int, K: int) -> float:
    """Average precision over the top ``K`` ranks, normalized by ``min(R, K)``."""
    rel = np.asarray(relevance, dtype=np.float64)
    if R < 1:
        raise ValueError("ap_at_k: a query needs at least one relevant item")
    if K < 1 or rel.shape[0] < K:
        raise ValueError(f"ap_at_k: relevance list of length {rel.shape[0]} is shorter than K={K}")
    rel = rel[:K]
    hits = np.cumsum(rel)
    ranks = np.arange(1, K + 1)
    return float(np.sum(hits / ranks * rel) / min(R, K))


@dataclass
class MapReport:
    values: dict  # K -> mAP@K
    n_queries: int  # queries that entered the mean
    skipped: int  # queries with no relevant item


def map_table(db: RetrievalDB, ks=DEFAULT_KS, threads: int = 1, chunk: int = 512) -> MapReport:
    """mAP@K for every K in ``ks``, using each code as a query against the rest."""
    if db.labels is None:
        raise ConfigError("map_at_k needs labels")
    ks = tuple(int(k) for k in ks)
    if not ks or min(ks) < 1:
        raise ConfigError(f"invalid K list {ks}")
    n = db.n
    labels = db.labels
    kmax = max(ks)
    counts = np.bincount(labels - labels.min()) if n else np.zeros(0, dtype=np.int64)
    n_rel = counts[labels - labels.min()] - 1 if n else counts

    def work(start):
        stop = min(start + chunk, n)
        dist = kernels.hamming_matrix(db.packed[start:stop], db.packed)
        rows = {k: np.zeros(stop - start) for k in ks}
        for q in range(start, stop):
            d = dist[q - start]
            order = np.argsort(d, kind="stable")
            order = order[order != q][:kmax]
            rel = (labels[order] == labels[q]).astype(np.float64)
            if rel.shape[0] < kmax:
                rel = np.concatenate([rel, np.zeros(kmax - rel.shape[0])])
            if n_rel[q] > 0:
                for k in ks:
                    rows[k][q - start] = ap_at_k(rel, int(n_rel[q]), k)
        return rows

    starts = list(range(0, n, chunk))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    valid = n_rel > 0
    used = int(valid.sum())
    values = {}
    for k in ks:
        per_query = np.concatenate([p[k] for p in parts]) if parts else np.zeros(0)
        values[k] = float(per_query[valid].sum() / used) if used else float("nan")
    return MapReport(values, used, n - used)


def map_at_k(db: RetrievalDB, K: int, threads: int = 1) -> float:
    return map_table(db, (K,), threads=threads).values[K]


def hash_dataset(model, features, labels=None, batch: int = 1024) -> RetrievalDB:
    """Encode every video (batch norm in infer mode) and pack the codes."""
    from .autoencoder import as_batch, encode

    x = as_batch(features)
    if x.shape[2] != model.feature_dim:
        raise ShapeError("hash_dataset: feature width differs from the model", x.shape, (model.feature_dim,))
    if x.shape[1] != model.frames:
        raise ShapeError("hash_dataset: frame count differs from the model", x.shape, (model.frames,))
    chunks = [encode(model.encoder, x[s : s + batch], mode="infer").code for s in range(0, x.shape[0], batch)]
    codes = np.concatenate(chunks) if chunks else np.ones((0, model.code_len))
    return RetrievalDB(pack_codes(codes), model.code_len, labels)
