"""Synthetic clustered frame-sequence data with known labels.

Each video belongs to a cluster. Its frames start at the cluster center,
drift along a per-video random direction at a constant rate, and carry
isotropic gaussian noise, so frame order matters and mean-pooled vectors
stay close to their center.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .formats import read_features, read_labels, write_features as _write_feat, write_labels


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 200
    n_clusters: int = 4
    frames: int = 24
    dim: int = 64
    separation: float = 10.0
    noise: float = 0.5
    drift: float = 0.2
    seed: int = 42

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_videos < self.n_clusters:
            raise ConfigError("need n_videos >= n_clusters >= 1")
        if self.frames < 1 or self.dim < 1:
            raise ConfigError("frames and dim must be positive")
        if min(self.separation, self.noise) < 0:
            raise ConfigError("separation and noise must be non-negative")


@dataclass
class Dataset:
    features: np.ndarray  # (n, M, D) float64
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ShapeError("Dataset features must be (n, M, D)", self.features.shape)
        if not np.all(np.isfinite(self.features)):
            raise ValueError("Dataset features must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ShapeError("one label per video", self.labels.shape, (self.n,))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def frames(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


def _draw_centers(rng, k, dim, sep, max_tries=10_000):
    # centers sit on the sphere of radius ``sep`` so cluster identity shows up
    # in cosine similarity; pairwise distance >= sep means >= 60 degrees apart
    centers = []
    tries = 0
    while len(centers) < k:
        v = rng.standard_normal(dim)
        v *= sep / np.linalg.norm(v)
        if all(np.linalg.norm(v - c) >= sep for c in centers):
            centers.append(v)
            tries = 0
            continue
        tries += 1
        if tries >= max_tries:
            raise ConfigError(
                f"cannot place {k} centers at pairwise distance >= {sep} on a sphere in {dim} dimensions"
            )
    return np.array(centers).reshape(k, dim)


def generate(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    k, n, M, D = spec.n_clusters, spec.n_videos, spec.frames, spec.dim
    if D == 1 and k > 2 and spec.separation > 0:
        raise ConfigError(f"cannot place {k} separated centers in one dimension")
    centers = _draw_centers(rng, k, D, spec.separation)
    labels = rng.permutation(np.arange(n) % k)
    directions = rng.standard_normal((n, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    t = np.arange(M, dtype=np.float64)
    x = (
        centers[labels][:, None, :]
        + spec.drift * t[None, :, None] * directions[:, None, :]
        + spec.noise * rng.standard_normal((n, M, D))
    )
    # snap to the float32 grid so the on-disk format round-trips exactly
    return Dataset(x.astype(np.float32).astype(np.float64), labels)


def write_features(ds: Dataset, path, labels_path=None):
    _write_feat(ds.features, path)
    if labels_path is not None:
        if ds.labels is None:
            raise ValueError("dataset has no labels to write")
        write_labels(ds.labels, labels_path)


def read_dataset(path, labels_path=None) -> Dataset:
    labels = read_labels(labels_path) if labels_path is not None else None
    return Dataset(read_features(path), labels)


__all__ = ["Dataset", "SyntheticSpec", "generate", "read_dataset", "read_features", "write_features"]
