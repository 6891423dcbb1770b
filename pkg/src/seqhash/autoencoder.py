"""Hierarchical binary encoder, the three decoders, and reconstruction loss.

Frames arrive as ``(B, M, D)`` batches (a single ``(M, D)`` video is
promoted to ``B = 1``). The encoder's second layer only sees every
``stride``-th output of the first, so it runs ``M / stride`` steps; the
sequence decoders mirror that with a short code-seeded layer feeding a
frame-rate layer at every ``stride``-th step.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .recurrent import (
    BlstmParams,
    LstmParams,
    ParamSet,
    blstm_step,
    blstm_step_backward,
    initial_code,
    lstm_step,
    lstm_step_backward,
)


def as_batch(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise ShapeError("expected frames shaped (B, M, D) or (M, D)", frames.shape)
    return frames


def check_stride(M: int, stride: int):
    if stride < 1 or M % stride:
        raise ShapeError(f"frame count {M} is not a multiple of stride {stride}")


@dataclass
class EncoderParams(ParamSet):
    layer1: LstmParams  # D -> H1
    layer2: BlstmParams  # H1 -> L, M/stride steps
    stride: int = 2


@dataclass
class SeqDecoderParams(ParamSet):
    """Two LSTM layers plus a linear head back to frame space."""

    l1: LstmParams  # recurrent only, hidden L, seeded with the code
    l2: LstmParams  # L -> H2
    W: np.ndarray  # (H2, D)
    r: np.ndarray  # (D,)

    @classmethod
    def init(cls, code_len, hidden, out_dim, rng, l1_input=0):
        return cls(
            l1=LstmParams.init(l1_input, code_len, rng),
            l2=LstmParams.init(code_len, hidden, rng),
            W=rng.uniform(-1.0, 1.0, size=(hidden, out_dim)) / np.sqrt(hidden),
            r=np.zeros(out_dim),
        )

    @classmethod
    def zeros(cls, code_len, hidden, out_dim):
        return cls(
            l1=LstmParams.zeros(0, code_len),
            l2=LstmParams.zeros(code_len, hidden),
            W=np.zeros((hidden, out_dim)),
            r=np.zeros(out_dim),
        )


@dataclass
class DecoderParams(ParamSet):
    forward: SeqDecoderParams
    backward: SeqDecoderParams
    glob: SeqDecoderParams
    global_steps: int = 1


@dataclass
class ModelParams(ParamSet):
    encoder: EncoderParams
    decoder: DecoderParams

    @classmethod
    def init(
        cls,
        feature_dim: int,
        code_len: int,
        frames: int,
        stride: int = 2,
        hidden1: int = 256,
        hidden2: int = 256,
        global_steps: int = 1,
        seed: int = 0,
        rng: np.random.Generator | None = None,
    ):
        check_stride(frames, stride)
        rng = rng if rng is not None else np.random.default_rng(seed)
        enc = EncoderParams(
            layer1=LstmParams.init(feature_dim, hidden1, rng),
            layer2=BlstmParams.init(hidden1, code_len, frames // stride, rng),
            stride=stride,
        )
        dec = DecoderParams(
            forward=SeqDecoderParams.init(code_len, hidden2, feature_dim, rng),
            backward=SeqDecoderParams.init(code_len, hidden2, feature_dim, rng),
            glob=SeqDecoderParams.init(code_len, hidden2, feature_dim, rng),
            global_steps=global_steps,
        )
        return cls(enc, dec)

    @property
    def code_len(self) -> int:
        return self.encoder.layer2.code_len

    @property
    def feature_dim(self) -> int:
        return self.encoder.layer1.input_dim

    @property
    def frames(self) -> int:
        return self.encoder.layer2.steps * self.encoder.stride


# --------------------------------------------------------------------------
# encoder


@dataclass
class EncodeResult:
    h: np.ndarray  # (B, L) final pre-binarization hidden
    b: np.ndarray  # (B, L) emitted code (hard sign unless relaxed training)
    l1_tapes: list = field(default_factory=list, repr=False)
    l2_tapes: list = field(default_factory=list, repr=False)

    @property
    def code(self) -> np.ndarray:
        return np.where(self.h >= 0, 1.0, -1.0)


def encode(p: EncoderParams, frames, mode: str = "infer", binarizer: str = "sgn", counter: Counter | None = None):
    """Run both encoder layers and return the final step's code."""
    x = as_batch(frames)
    B, M, D = x.shape
    if D != p.layer1.input_dim:
        raise ShapeError("encode: feature width", x.shape, p.layer1.W.shape)
    check_stride(M, p.stride)
    steps = M // p.stride
    if steps != p.layer2.steps:
        raise ShapeError(f"encode: model was built for {p.layer2.steps * p.stride} frames", x.shape)
    if not np.all(np.isfinite(x)):
        raise NumericError("encode: non-finite frame features")
    H1 = p.layer1.hidden_dim
    L = p.layer2.code_len
    z = np.zeros((B, H1))
    c = np.zeros((B, H1))
    l1_tapes = []
    strided = []
    for t in range(M):
        z, c, tape = lstm_step(p.layer1, x[:, t], z, c)
        l1_tapes.append(tape)
        if (t + 1) % p.stride == 0:
            strided.append(z)
    if counter is not None:
        counter["enc_l1"] += M
    b = initial_code(B, L)
    cell = np.zeros((B, L))
    l2_tapes = []
    for s, z_s in enumerate(strided):
        h, b, cell, tape = blstm_step(p.layer2, z_s, b, cell, s, mode, binarizer)
        l2_tapes.append(tape)
    if counter is not None:
        counter["enc_l2"] += len(strided)
    return EncodeResult(h=h, b=b, l1_tapes=l1_tapes, l2_tapes=l2_tapes)


def commit_running_stats(p: EncoderParams, res: EncodeResult):
    """Copy the running statistics recorded in train-mode tapes back into ``p``."""
    for tape in res.l2_tapes:
        if tape.mode == "train":
            p.layer2.running_mean[tape.step] = tape.bn_state.running_mean
            p.layer2.running_var[tape.step] = tape.bn_state.running_var


def encode_backward(p: EncoderParams, res: EncodeResult, dh, db):
    """Gradients of the encoder given upstream gradients on the final ``h`` and code."""
    grads = p.zeros_like()
    L = p.layer2.code_len
    B = res.h.shape[0]
    zero = np.zeros((B, L))
    dz_strided = [None] * len(res.l2_tapes)
    dc = zero
    for s in range(len(res.l2_tapes) - 1, -1, -1):
        tape = res.l2_tapes[s]
        g, dz, db_prev, dc = blstm_step_backward(p.layer2, tape, dh, db, dc)
        grads.layer2.iadd(g)
        dz_strided[s] = dz
        dh, db = zero, db_prev
    H1 = p.layer1.hidden_dim
    dz_rec = np.zeros((B, H1))
    dc = np.zeros((B, H1))
    for t in range(len(res.l1_tapes) - 1, -1, -1):
        dh1 = dz_rec
        if (t + 1) % p.stride == 0:
            dh1 = dh1 + dz_strided[(t + 1) // p.stride - 1]
        g, _, dz_rec, dc = lstm_step_backward(p.layer1, res.l1_tapes[t], dh1, dc)
        grads.layer1.iadd(g)
    return grads


# --------------------------------------------------------------------------
# decoders


@dataclass
class DecodeTape:
    l1_tapes: list
    l2_tapes: list
    order: list  # frame index (0-based) emitted at each layer-2 step
    inject: list  # layer-1 output index fed at each layer-2 step, or None
    outputs: list  # layer-2 hidden per step


def _decode_sequence(p: SeqDecoderParams, b, M: int, stride: int, reverse: bool, counter, tag):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        b = b[None]
    if b.shape[1] != p.l1.hidden_dim:
        raise ShapeError("decode: code length must equal decoder layer-1 width", b.shape, p.l1.U.shape)
    check_stride(M, stride)
    B = b.shape[0]
    empty = np.zeros((B, 0))
    z, c = b, np.zeros_like(b)
    zs, l1_tapes = [], []
    for _ in range(M // stride):
        z, c, tape = lstm_step(p.l1, empty, z, c)
        zs.append(z)
        l1_tapes.append(tape)
    H2 = p.l2.hidden_dim
    h, c = np.zeros((B, H2)), np.zeros((B, H2))
    zero_in = np.zeros((B, p.l2.input_dim))
    rec = np.empty((B, M, p.W.shape[1]))
    order, inject, outputs, l2_tapes = [], [], [], []
    js = range(M, 0, -1) if reverse else range(1, M + 1)
    for j in js:
        offset = (M - j) if reverse else (j - 1)
        idx = offset // stride if offset % stride == 0 else None
        x = zs[idx] if idx is not None else zero_in
        h, c, tape = lstm_step(p.l2, x, h, c)
        rec[:, j - 1] = h @ p.W + p.r
        order.append(j - 1)
        inject.append(idx)
        outputs.append(h)
        l2_tapes.append(tape)
    if counter is not None:
        counter[f"{tag}_l1"] += M // stride
        counter[f"{tag}_l2"] += M
    return rec, DecodeTape(l1_tapes, l2_tapes, order, inject, outputs)


def _decode_sequence_backward(p: SeqDecoderParams, tape: DecodeTape, drec):
    grads = p.zeros_like()
    B = drec.shape[0]
    H2 = p.l2.hidden_dim
    L = p.l1.hidden_dim
    dzs = [np.zeros((B, L)) for _ in tape.l1_tapes]
    dh_rec = np.zeros((B, H2))
    dc = np.zeros((B, H2))
    for k in range(len(tape.l2_tapes) - 1, -1, -1):
        d_out = drec[:, tape.order[k]]
        grads.W += tape.outputs[k].T @ d_out
        grads.r += d_out.sum(axis=0)
        dh = dh_rec + d_out @ p.W.T
        g, dx, dh_rec, dc = lstm_step_backward(p.l2, tape.l2_tapes[k], dh, dc)
        grads.l2.iadd(g)
        if tape.inject[k] is not None:
            dzs[tape.inject[k]] += dx
    dh_rec = np.zeros((B, L))
    dc = np.zeros((B, L))
    for i in range(len(tape.l1_tapes) - 1, -1, -1):
        g, _, dh_rec, dc = lstm_step_backward(p.l1, tape.l1_tapes[i], dh_rec + dzs[i], dc)
        grads.l1.iadd(g)
    return grads, dh_rec  # gradient w.r.t. the seed code


def decode_forward(p: DecoderParams, b, M: int, stride: int, counter: Counter | None = None):
    """Reconstruct frames in temporal order. Returns ``(rec, tape)``, rec ``(B, M, D)``."""
    return _decode_sequence(p.forward, b, M, stride, False, counter, "fwd")


def decode_backward(p: DecoderParams, b, M: int, stride: int, counter: Counter | None = None):
    """Reconstruct frames from last to first; row ``t`` of the result is frame ``t``."""
    return _decode_sequence(p.backward, b, M, stride, True, counter, "bwd")


def decode_global(p: DecoderParams, b, counter: Counter | None = None):
    """Reconstruct the mean frame. Returns ``(v_hat, tape)`` with v_hat ``(B, D)``."""
    g = p.glob
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        b = b[None]
    if b.shape[1] != g.l1.hidden_dim:
        raise ShapeError("decode_global: code length", b.shape, g.l1.U.shape)
    B = b.shape[0]
    empty = np.zeros((B, 0))
    z, c = b, np.zeros_like(b)
    h2, c2 = np.zeros((B, g.l2.hidden_dim)), np.zeros((B, g.l2.hidden_dim))
    l1_tapes, l2_tapes = [], []
    for _ in range(p.global_steps):
        z, c, t1 = lstm_step(g.l1, empty, z, c)
        h2, c2, t2 = lstm_step(g.l2, z, h2, c2)
        l1_tapes.append(t1)
        l2_tapes.append(t2)
    if counter is not None:
        counter["glob_l1"] += p.global_steps
        counter["glob_l2"] += p.global_steps
    return h2 @ g.W + g.r, DecodeTape(l1_tapes, l2_tapes, [], [], [h2])


def _decode_global_backward(p: SeqDecoderParams, tape: DecodeTape, dv):
    grads = p.zeros_like()
    grads.W = tape.outputs[-1].T @ dv
    grads.r = dv.sum(axis=0)
    dh2 = dv @ p.W.T
    dc2 = np.zeros_like(dh2)
    B, L = dv.shape[0], p.l1.hidden_dim
    dz_rec, dc1 = np.zeros((B, L)), np.zeros((B, L))
    for k in range(len(tape.l2_tapes) - 1, -1, -1):
        g2, dz, dh2, dc2 = lstm_step_backward(p.l2, tape.l2_tapes[k], dh2, dc2)
        grads.l2.iadd(g2)
        g1, _, dz_rec, dc1 = lstm_step_backward(p.l1, tape.l1_tapes[k], dz_rec + dz, dc1)
        grads.l1.iadd(g1)
    return grads, dz_rec


# --------------------------------------------------------------------------
# loss and full pass


def recon_loss(frames, fwd_rec, bwd_rec, glob_rec):
    """Squared-error reconstruction loss summed over every video in the batch.

    Returns ``(loss, d_fwd, d_bwd, d_glob)``. For a single ``(M, D)`` video
    the gradients keep the caller's (unbatched) shapes.
    """
    single = np.ndim(frames) == 2
    v = as_batch(frames)
    fr = as_batch(fwd_rec)
    br = as_batch(bwd_rec)
    gr = np.asarray(glob_rec, dtype=np.float64)
    if gr.ndim == 1:
        gr = gr[None]
    if fr.shape != v.shape or br.shape != v.shape or gr.shape != (v.shape[0], v.shape[2]):
        raise ShapeError("recon_loss: reconstruction shapes", v.shape, fr.shape, br.shape, gr.shape)
    v_g = v.mean(axis=1)
    rf, rb, rg = fr - v, br - v, gr - v_g
    loss = float(np.sum(rf**2) + np.sum(rb**2) + np.sum(rg**2))
    grads = (2.0 * rf, 2.0 * rb, 2.0 * rg)
    if single:
        grads = tuple(g[0] for g in grads)
    return (loss,) + grads


@dataclass
class ForwardPass:
    frames: np.ndarray
    enc: EncodeResult
    fwd: np.ndarray
    bwd: np.ndarray
    glob: np.ndarray
    fwd_tape: DecodeTape = field(repr=False)
    bwd_tape: DecodeTape = field(repr=False)
    glob_tape: DecodeTape = field(repr=False)


def forward(model: ModelParams, frames, mode: str = "train", binarizer: str = "sgn", counter: Counter | None = None):
    x = as_batch(frames)
    M = x.shape[1]
    stride = model.encoder.stride
    enc = encode(model.encoder, x, mode, binarizer, counter)
    fwd, ft = decode_forward(model.decoder, enc.b, M, stride, counter)
    bwd, bt = decode_backward(model.decoder, enc.b, M, stride, counter)
    glob, gt = decode_global(model.decoder, enc.b, counter)
    return ForwardPass(x, enc, fwd, bwd, glob, ft, bt, gt)


def autoencoder_backward(model: ModelParams, fp: ForwardPass, d_fwd, d_bwd, d_glob, dh_code=None):
    """Gradients of every parameter given loss gradients on the reconstructions.

    ``dh_code`` optionally adds a gradient on the encoder's final ``h``
    (the neighborhood term). Gradients reaching the code pass the
    straight-through gate before entering the encoder.
    """
    if not fp.enc.l2_tapes or fp.enc.l2_tapes[0].mode != "train":
        raise ValueError("autoencoder_backward needs tapes from a train-mode forward pass")
    dec = model.decoder
    g_fwd, db_f = _decode_sequence_backward(dec.forward, fp.fwd_tape, as_batch(d_fwd))
    g_bwd, db_b = _decode_sequence_backward(dec.backward, fp.bwd_tape, as_batch(d_bwd))
    d_glob = np.asarray(d_glob, dtype=np.float64).reshape(fp.glob.shape)
    g_glob, db_g = _decode_global_backward(dec.glob, fp.glob_tape, d_glob)
    db = db_f + db_b + db_g
    dh = np.zeros_like(fp.enc.h) if dh_code is None else np.asarray(dh_code, dtype=np.float64)
    g_enc = encode_backward(model.encoder, fp.enc, dh, db)
    g_dec = DecoderParams(g_fwd, g_bwd, g_glob, dec.global_steps)
    return ModelParams(g_enc, g_dec)
