"""Binary LSTM auto-encoder hashing for frame-feature sequences."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .autoencoder import ModelParams, encode, forward
from .datagen import Dataset, SyntheticSpec, generate
from .errors import (
    ConfigError,
    CorruptFile,
    FormatError,
    MagicMismatch,
    NumericError,
    SeqHashError,
    ShapeError,
    VersionMismatch,
)
from .neighborhood import NeighborGraph, build_graph, build_knn, expand_neighbors, mean_pool
from .retrieval import RetrievalDB, ap_at_k, hamming_distance, hash_dataset, map_at_k, map_table, rank
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Checkpoint",
    "ConfigError",
    "CorruptFile",
    "Dataset",
    "FormatError",
    "MagicMismatch",
    "ModelParams",
    "NeighborGraph",
    "NumericError",
    "RetrievalDB",
    "SeqHashError",
    "ShapeError",
    "SyntheticSpec",
    "TrainConfig",
    "VersionMismatch",
    "ap_at_k",
    "build_graph",
    "build_knn",
    "encode",
    "expand_neighbors",
    "forward",
    "generate",
    "hamming_distance",
    "hash_dataset",
    "load_checkpoint",
    "map_at_k",
    "map_table",
    "mean_pool",
    "rank",
    "save_checkpoint",
    "train",
]
