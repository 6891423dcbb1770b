"""Mini-batch SGD over reconstruction + neighborhood loss, and checkpoints.

Checkpoint layout (little-endian)::

    magic "SSVH-CKPT" | version:u32 | header_len:u32 | header (UTF-8 JSON)
    | float64 blobs | crc32:u32 of every preceding byte

The JSON header holds the config, feature width, completed epochs, the
numpy ``PCG64`` state, the loss history and the blob table: a list of
``[name, shape]`` in blob order. Blob order is fixed: trainable arrays in
``ModelParams.named_arrays()`` order, then the batch-norm running
statistics (``named_arrays(buffers=True)``).
"""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autoencoder import ModelParams, autoencoder_backward, check_stride, commit_running_stats, forward, recon_loss
from .errors import ConfigError, CorruptFile, NumericError, ShapeError
from .formats import CKPT_MAGIC, Reader
from .neighborhood import NeighborGraph, neighbor_loss_batch

log = logging.getLogger(__name__)

CKPT_VERSION = 1
ACTIVATIONS = {"hard_sgn_ste": "sgn", "tanh_relax": "tanh"}
# fields that fix array shapes; a checkpoint can only resume under equal values
ARCH_FIELDS = ("code_len", "stride", "frames", "hidden1", "hidden2", "global_steps")


@dataclass
class TrainConfig:
    code_len: int = 64
    stride: int = 2
    frames: int = 24
    hidden1: int = 256
    hidden2: int = 256
    global_steps: int = 1
    lam: float = 0.001
    eta: float = 0.2
    learning_rate: float = 0.01
    lr_decay: float = 0.1  # multiplied in every third of the run
    clip_norm: float = 5.0
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    activation: str = "hard_sgn_ste"
    k1: int = 20
    k2: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda={self.lam} must lie in [0, 1]")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 (batch norm)")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.code_len < 1 or self.epochs < 0:
            raise ConfigError("code_len must be positive and epochs non-negative")
        try:
            check_stride(self.frames, self.stride)
        except ShapeError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def binarizer(self) -> str:
        return ACTIVATIONS[self.activation]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LossRecord:
    epoch: int
    recon: float
    neighbor: float
    total: float


@dataclass
class Checkpoint:
    config: TrainConfig
    model: ModelParams
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def total_loss(recon: float, neighbor: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda={lam} must lie in [0, 1]")
    return lam * recon + (1.0 - lam) * neighbor


def sgd_step(params, grads, lr: float):
    """In-place ``w -= lr * g`` over every trainable array; returns ``params``."""
    pairs = list(zip(params.named_arrays(), grads.named_arrays()))
    for (name, w), (gname, g) in pairs:
        if name != gname or w.shape != g.shape:
            raise ShapeError(f"sgd_step: {name} vs {gname}", w.shape, g.shape)
    for (_, w), (_, g) in pairs:
        w -= lr * g
    return params


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in grads.named_arrays()))


@dataclass
class BatchResult:
    recon: float  # mean reconstruction loss per video
    neighbor: float  # mean pair loss
    total: float
    grads: ModelParams
    forward: object


def batch_objective(model: ModelParams, frames, S, lam: float, eta: float, binarizer: str = "sgn", need_grads=True):
    """Loss and gradients of one mini-batch.

    ``S`` is the ``(B, B)`` +-1 similarity block of the batch members.
    """
    fp = forward(model, frames, "train", binarizer)
    B = fp.frames.shape[0]
    r_sum, d_f, d_b, d_g = recon_loss(fp.frames, fp.fwd, fp.bwd, fp.glob)
    nb, dH = neighbor_loss_batch(fp.enc.h, fp.enc.code, S, eta)
    recon = r_sum / B
    total = total_loss(recon, nb, lam)
    grads = None
    if need_grads:
        w = lam / B
        grads = autoencoder_backward(model, fp, w * d_f, w * d_b, w * d_g, (1.0 - lam) * dH)
    return BatchResult(recon, nb, total, grads, fp)


def _batches(order, batch_size):
    n = len(order)
    return np.array_split(order, max(1, math.ceil(n / batch_size)))


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    span = max(1, math.ceil(cfg.epochs / 3))
    return cfg.learning_rate * cfg.lr_decay ** (epoch // span)


def _check_compatible(cfg: TrainConfig, ck: Checkpoint, feature_dim: int):
    for name in ARCH_FIELDS:
        a, b = getattr(cfg, name), getattr(ck.config, name)
        if a != b:
            raise ConfigError(f"checkpoint was trained with {name}={b}, requested {name}={a}")
    if ck.model.feature_dim != feature_dim:
        raise ConfigError(f"checkpoint expects feature width {ck.model.feature_dim}, data has {feature_dim}")


def train(features, graph: NeighborGraph, cfg: TrainConfig, resume: Checkpoint | None = None, on_epoch=None):
    """Train from scratch (or continue ``resume``) for ``cfg.epochs`` epochs.

    Returns ``(checkpoint, history)`` where history lists one
    :class:`LossRecord` per epoch, including those carried over from
    ``resume``.
    """
    x = np.asarray(features, dtype=np.float64)
    n, M, D = x.shape
    if M != cfg.frames:
        raise ConfigError(f"data has {M} frames per video, config expects {cfg.frames}")
    if graph.n != n:
        raise ConfigError(f"graph covers {graph.n} videos, data has {n}")
    batch_size = min(cfg.batch_size, n)
    if batch_size < 2:
        raise ConfigError("need at least two videos to train")
    rng = np.random.default_rng(cfg.seed)
    if resume is None:
        model = ModelParams.init(
            D, cfg.code_len, M, cfg.stride, cfg.hidden1, cfg.hidden2, cfg.global_steps, rng=rng
        )
        start, history = 0, []
    else:
        _check_compatible(cfg, resume, D)
        model = resume.model.copy()
        rng.bit_generator.state = resume.rng_state
        start, history = resume.epoch, list(resume.history)
    binarizer = cfg.binarizer

    for epoch in range(start, start + cfg.epochs):
        lr = learning_rate_at(cfg, epoch - start)
        sums = np.zeros(2)
        batches = _batches(rng.permutation(n), batch_size)
        for bi, idx in enumerate(batches):
            idx = np.sort(idx)
            res = batch_objective(model, x[idx], graph.similarity_block(idx), cfg.lam, cfg.eta, binarizer)
            for term, value in (("reconstruction", res.recon), ("neighbor", res.neighbor)):
                if not math.isfinite(value):
                    raise NumericError(f"epoch {epoch} batch {bi}: non-finite {term} loss")
            norm = global_norm(res.grads)
            if not math.isfinite(norm):
                raise NumericError(f"epoch {epoch} batch {bi}: non-finite gradient")
            scale = lr * min(1.0, cfg.clip_norm / norm) if norm > 0 else lr
            sgd_step(model, res.grads, scale)
            commit_running_stats(model.encoder, res.forward.enc)
            sums += (res.recon, res.neighbor)
        recon, nb = sums / len(batches)
        rec = LossRecord(epoch, float(recon), float(nb), total_loss(float(recon), float(nb), cfg.lam))
        history.append(rec)
        log.info("epoch %d recon %.6g neighbor %.6g total %.6g", epoch, rec.recon, rec.neighbor, rec.total)
        if on_epoch is not None:
            on_epoch(rec, model)

    ck = Checkpoint(cfg, model, start + cfg.epochs, rng.bit_generator.state, history)
    return ck, history


# --------------------------------------------------------------------------
# persistence


def _all_arrays(model: ModelParams):
    return list(model.named_arrays()) + list(model.named_arrays(buffers=True))


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    arrays = _all_arrays(ck.model)
    header = {
        "config": ck.config.to_dict(),
        "feature_dim": ck.model.feature_dim,
        "epoch": ck.epoch,
        "rng_state": ck.rng_state,
        "history": [asdict(r) for r in ck.history],
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hdr)) + hdr
    body += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ck: Checkpoint, path):
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    from .errors import VersionMismatch

    data = Path(path).read_bytes()
    r = Reader(data, path)
    r.expect_magic(CKPT_MAGIC)
    if len(data) < r.pos + 12:
        raise CorruptFile(f"{path}: truncated checkpoint")
    (version,) = struct.unpack_from("<I", data, r.pos)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or damaged)")
    r.data = data[:-4]
    r.unpack("I")
    (hlen,) = r.unpack("I")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    cfg = TrainConfig.from_dict(header["config"])
    model = ModelParams.init(
        header["feature_dim"], cfg.code_len, cfg.frames, cfg.stride, cfg.hidden1, cfg.hidden2, cfg.global_steps
    )
    expected = _all_arrays(model)
    table = header["arrays"]
    if [t[0] for t in table] != [name for name, _ in expected]:
        raise CorruptFile(f"{path}: parameter table does not match the configured architecture")
    for (name, shape), (_, target) in zip(table, expected):
        if tuple(shape) != target.shape:
            raise CorruptFile(f"{path}: {name} has shape {tuple(shape)}, expected {target.shape}")
        target[...] = r.array("f8", target.size).reshape(target.shape)
    r.finish()
    history = [LossRecord(**h) for h in header["history"]]
    return Checkpoint(cfg, model, header["epoch"], header["rng_state"], history)
