"""Self-supervised neighbor graph and the neighborhood-preservation loss.

The graph is built once from mean-pooled frame features:

1. exact K1 nearest neighbors of every video by cosine similarity;
2. for video ``i``, the K2 videos whose K1 lists overlap ``i``'s list the
   most are selected, and every member of those lists (plus the selected
   videos) becomes a neighbor of ``i``;
3. the relation is symmetrized.

Pairs marked as neighbors get similarity +1; every other pair gets -1.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericError, ShapeError

# similarities equal to this many decimals count as ties, so vectors that
# are exactly tied (duplicates, parallel vectors) stay tied after rounding
TIE_DECIMALS = 12


def mean_pool(frames) -> np.ndarray:
    """Average frame rows; ``(M, D) -> (D,)`` or ``(N, M, D) -> (N, D)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim not in (2, 3) or frames.shape[-2] == 0:
        raise ShapeError("mean_pool: need at least one frame", frames.shape)
    return frames.mean(axis=-2)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("cosine_sim: length mismatch", a.shape, b.shape)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine_sim: zero-norm vector")
    return float(a @ b / (na * nb))


def _unit_rows(videos):
    X = np.asarray(videos, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("expected an (n, D) matrix of video vectors", X.shape)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise NumericError(f"zero-norm video vector at index {int(np.argmin(norms))}")
    return X / norms[:, None]


def build_knn(videos, k1: int, threads: int = 1, chunk: int = 1024) -> np.ndarray:
    """Exact cosine K1-NN table, shape ``(n, k1)``.

    Rows list neighbors by descending similarity; similarities equal to
    ``TIE_DECIMALS`` decimals are ordered by ascending index. A video is
    never its own neighbor.
    """
    Xn = _unit_rows(videos)
    n = Xn.shape[0]
    if not 1 <= k1 < n:
        raise ConfigError(f"K1={k1} must satisfy 1 <= K1 < n={n}")
    out = np.empty((n, k1), dtype=np.int64)

    def work(start):
        stop = min(start + chunk, n)
        sims = np.round(Xn[start:stop] @ Xn.T, TIE_DECIMALS)
        rows = np.arange(start, stop)
        sims[rows - start, rows] = -np.inf
        # stable sort on -sim keeps ascending index among equal values
        order = np.argsort(-sims, axis=1, kind="stable")
        out[start:stop] = order[:, :k1]

    starts = range(0, n, chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return out


@dataclass
class NeighborGraph:
    """Symmetric, irreflexive neighbor sets; absent pairs have similarity -1."""

    n: int
    neighbors: list  # list of sorted int64 arrays

    def __post_init__(self):
        if len(self.neighbors) != self.n:
            raise ShapeError("NeighborGraph: one neighbor list per video", (len(self.neighbors),), (self.n,))

    def similarity(self, i: int, j: int) -> int:
        nb = self.neighbors[i]
        k = np.searchsorted(nb, j)
        return 1 if k < len(nb) and nb[k] == j else -1

    def similarity_block(self, idx) -> np.ndarray:
        """Dense ``(len(idx), len(idx))`` matrix of +-1 similarities."""
        idx = np.asarray(idx, dtype=np.int64)
        S = -np.ones((len(idx), len(idx)))
        for a, i in enumerate(idx):
            S[a] = np.where(np.isin(idx, self.neighbors[i]), 1.0, -1.0)
        return S

    def to_dense(self) -> np.ndarray:
        return self.similarity_block(np.arange(self.n))

    def is_symmetric(self) -> bool:
        return all(i in self.neighbors[j] for i in range(self.n) for j in self.neighbors[i])

    def num_edges(self) -> int:
        return sum(len(nb) for nb in self.neighbors) // 2

    def __eq__(self, other):
        if not isinstance(other, NeighborGraph) or other.n != self.n:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.neighbors, other.neighbors))


def symmetrize(sets: list) -> list:
    n = len(sets)
    full = [set(s) for s in sets]
    for i, s in enumerate(sets):
        for j in s:
            full[j].add(i)
    return [np.array(sorted(s - {i}), dtype=np.int64) for i, s in enumerate(full)]


def expand_neighbors(P, k2: int) -> NeighborGraph:
    """Grow each K1 list with the lists of its K2 most-overlapping videos."""
    P = np.asarray(P, dtype=np.int64)
    n, k1 = P.shape
    if not 0 <= k2 <= n - 1:
        raise ConfigError(f"K2={k2} must satisfy 0 <= K2 <= n-1={n - 1}")
    A = sp.csr_matrix((np.ones(n * k1, dtype=np.int64), (np.repeat(np.arange(n), k1), P.ravel())), shape=(n, n))
    overlap = (A @ A.T).tocsr()
    overlap.setdiag(0)
    overlap.eliminate_zeros()
    sets = []
    for i in range(n):
        members = set(P[i].tolist())
        if k2:
            lo, hi = overlap.indptr[i], overlap.indptr[i + 1]
            cand = overlap.indices[lo:hi]
            counts = overlap.data[lo:hi]
            order = np.lexsort((cand, -counts))[:k2]
            for j in cand[order]:
                members.update(P[j].tolist())
                members.add(int(j))
        members.discard(i)
        sets.append(members)
    return NeighborGraph(n, symmetrize(sets))


def build_graph(videos, k1: int = 20, k2: int = 10, threads: int = 1) -> NeighborGraph:
    return expand_neighbors(build_knn(videos, k1, threads=threads), k2)


def build_graph_sharded(videos, k1: int, k2: int, shards: int, threads: int = 1) -> NeighborGraph:
    """Independent graphs over contiguous shards, stitched into global indices.

    Videos in different shards are never neighbors.
    """
    X = np.asarray(videos, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= shards <= n:
        raise ConfigError(f"shards={shards} must lie in [1, n={n}]")
    neighbors = []
    offset = 0
    for part in np.array_split(np.arange(n), shards):
        g = build_graph(X[part], k1, k2, threads)
        neighbors.extend(nb + offset for nb in g.neighbors)
        offset += len(part)
    return NeighborGraph(n, neighbors)


# --------------------------------------------------------------------------
# loss


def neighbor_loss(h_i, h_j, s_ij, b_i, b_j, L: int, eta: float):
    """Pair loss ``(h_i.h_j / L - s)^2 + eta ||b_i - h_i||^2 + eta ||b_j - h_j||^2``.

    Codes are held constant. Returns ``(loss, grad_h_i, grad_h_j)``.
    """
    h_i, h_j, b_i, b_j = (np.asarray(v, dtype=np.float64) for v in (h_i, h_j, b_i, b_j))
    if not (h_i.shape == h_j.shape == b_i.shape == b_j.shape == (L,)):
        raise ShapeError("neighbor_loss: vectors must have length L", h_i.shape, h_j.shape, b_i.shape, b_j.shape)
    if s_ij not in (-1, 1):
        raise ValueError("neighbor_loss: similarity must be -1 or +1")
    r = h_i @ h_j / L - s_ij
    qi, qj = b_i - h_i, b_j - h_j
    loss = r * r + eta * (qi @ qi) + eta * (qj @ qj)
    g_i = 2.0 * r * h_j / L - 2.0 * eta * qi
    g_j = 2.0 * r * h_i / L - 2.0 * eta * qj
    return float(loss), g_i, g_j


def neighbor_loss_batch(H, codes, S, eta: float):
    """Mean of :func:`neighbor_loss` over all pairs ``i < j`` of a batch.

    ``H`` and ``codes`` are ``(B, L)``; ``S`` is the ``(B, B)`` +-1 block.
    Returns ``(mean_loss, dH)``.
    """
    H = np.asarray(H, dtype=np.float64)
    B, L = H.shape
    if B < 2:
        raise ShapeError("neighbor_loss_batch: need at least two videos", H.shape)
    pairs = B * (B - 1) // 2
    R = H @ H.T / L - S
    np.fill_diagonal(R, 0.0)
    Q = codes - H
    # each video appears in B-1 pairs
    loss = 0.5 * np.sum(R * R) + eta * (B - 1) * np.sum(Q * Q)
    dH = 2.0 * (R @ H) / L - 2.0 * eta * (B - 1) * Q
    return float(loss) / pairs, dH / pairs
