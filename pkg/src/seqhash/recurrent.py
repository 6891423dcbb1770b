"""LSTM and binary-LSTM cells with hand-derived backward passes.

All cells work on a batch: every vector argument is a ``(B, dim)`` array.
Gate blocks are packed along the last axis in the order forget, input,
output, candidate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from .errors import ShapeError
from .numerics import BatchNormState, as_matrix, batch_norm, batch_norm_backward, sigmoid

BINARIZERS = ("sgn", "clip", "tanh")


class ParamSet:
    """Mixin for dataclasses whose array fields are trainable parameters.

    ``_buffers`` lists array fields that are state but not parameters
    (they are saved in checkpoints but never receive gradients).
    """

    _buffers: tuple = ()

    def named_arrays(self, prefix: str = "", buffers: bool = False) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, ParamSet):
                yield from value.named_arrays(name + ".", buffers)
            elif isinstance(value, np.ndarray):
                if (f.name in self._buffers) == buffers:
                    yield name, value

    def zeros_like(self):
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ParamSet):
                kwargs[f.name] = value.zeros_like()
            elif isinstance(value, np.ndarray):
                kwargs[f.name] = np.zeros_like(value)
            else:
                kwargs[f.name] = value
        return type(self)(**kwargs)

    def copy(self):
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (ParamSet, np.ndarray)):
                kwargs[f.name] = value.copy()
            else:
                kwargs[f.name] = value
        return type(self)(**kwargs)

    def iadd(self, other, scale: float = 1.0):
        for (_, a), (_, b) in zip(self.named_arrays(), other.named_arrays()):
            a += scale * b
        return self


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# vanilla LSTM


@dataclass
class LstmParams(ParamSet):
    W: np.ndarray  # (input_dim, 4H)
    U: np.ndarray  # (H, 4H)
    bias: np.ndarray  # (4H,)

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        H = hidden_dim
        bias = np.zeros(4 * H)
        bias[:H] = 1.0
        return cls(
            W=_uniform(rng, input_dim, (input_dim, 4 * H)),
            U=_uniform(rng, H, (H, 4 * H)),
            bias=bias,
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int):
        H = hidden_dim
        return cls(W=np.zeros((input_dim, 4 * H)), U=np.zeros((H, 4 * H)), bias=np.zeros(4 * H))


@dataclass
class LstmTape:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def lstm_step(p: LstmParams, x, h_prev, c_prev):
    """One LSTM step. Returns ``(h, c, tape)``."""
    x = as_matrix(x)
    h_prev = as_matrix(h_prev)
    c_prev = as_matrix(c_prev)
    H = p.hidden_dim
    if x.shape[1] != p.input_dim:
        raise ShapeError("lstm_step: input width", x.shape, p.W.shape)
    if h_prev.shape[1] != H or c_prev.shape != h_prev.shape or x.shape[0] != h_prev.shape[0]:
        raise ShapeError("lstm_step: state shape", h_prev.shape, c_prev.shape, x.shape)
    a = h_prev @ p.U + p.bias
    if p.input_dim:
        a += x @ p.W
    f = sigmoid(a[:, :H])
    i = sigmoid(a[:, H : 2 * H])
    o = sigmoid(a[:, 2 * H : 3 * H])
    g = np.tanh(a[:, 3 * H :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, LstmTape(x, h_prev, c_prev, f, i, o, g, c, tanh_c)


def lstm_step_backward(p: LstmParams, tape: LstmTape, dh, dc):
    """Backward of :func:`lstm_step`.

    Returns ``(grads, dx, dh_prev, dc_prev)`` where ``grads`` is an
    :class:`LstmParams` holding the parameter gradients.
    """
    if dh.shape != tape.c.shape or dc.shape != tape.c.shape:
        raise ShapeError("lstm_step_backward: upstream gradient", dh.shape, dc.shape, tape.c.shape)
    if p.U.shape[0] != tape.c.shape[1]:
        raise ShapeError("lstm_step_backward: tape does not match params", tape.c.shape, p.U.shape)
    f, i, o, g = tape.f, tape.i, tape.o, tape.g
    dc = dc + dh * o * (1.0 - tape.tanh_c**2)
    da = np.concatenate(
        [
            dc * tape.c_prev * f * (1.0 - f),
            dc * g * i * (1.0 - i),
            dh * tape.tanh_c * o * (1.0 - o),
            dc * i * (1.0 - g**2),
        ],
        axis=1,
    )
    grads = LstmParams(W=tape.x.T @ da, U=tape.h_prev.T @ da, bias=da.sum(axis=0))
    dx = da @ p.W.T
    dh_prev = da @ p.U.T
    dc_prev = dc * f
    return grads, dx, dh_prev, dc_prev


# --------------------------------------------------------------------------
# binary LSTM


def sgn(h):
    """Hard sign with ``sgn(0) = +1``."""
    return np.where(np.asarray(h) >= 0, 1.0, -1.0)


def sgn_surrogate(h):
    """Clipped identity: -1 below -1, +1 above 1, ``h`` in between."""
    return np.clip(h, -1.0, 1.0)


def sgn_surrogate_grad(h):
    """Derivative of the clipped identity, ``1(|h| <= 1)``."""
    return (np.abs(h) <= 1.0).astype(np.float64)


def binarize(h, binarizer: str, mode: str = "train"):
    """Forward value of the code produced from ``h``.

    ``sgn`` uses the hard sign (straight-through in backward), ``clip`` the
    clipped identity, ``tanh`` the smooth relaxation. In infer mode every
    binarizer emits the hard sign.
    """
    if mode == "infer" or binarizer == "sgn":
        return sgn(h)
    if binarizer == "clip":
        return sgn_surrogate(h)
    if binarizer == "tanh":
        return np.tanh(h)
    raise ValueError(f"unknown binarizer {binarizer!r}")


def binarize_grad(h, binarizer: str):
    if binarizer in ("sgn", "clip"):
        return sgn_surrogate_grad(h)
    if binarizer == "tanh":
        return 1.0 - np.tanh(h) ** 2
    raise ValueError(f"unknown binarizer {binarizer!r}")


@dataclass
class BlstmParams(ParamSet):
    W: np.ndarray  # (input_dim, 4L)
    U: np.ndarray  # (L, 4L), recurrent input is the previous code
    peep: np.ndarray  # (3, L): forget, input, output peepholes on c_{t-1}
    bias: np.ndarray  # (4L,)
    gamma: np.ndarray  # (steps, L) batch-norm scale per time step
    beta: np.ndarray  # (steps, L)
    running_mean: np.ndarray  # (steps, L)
    running_var: np.ndarray  # (steps, L)
    momentum: float = 0.9
    epsilon: float = 1e-5

    _buffers = ("running_mean", "running_var")

    @property
    def code_len(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @property
    def steps(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def init(cls, input_dim: int, code_len: int, steps: int, rng: np.random.Generator, **bn):
        L = code_len
        bias = np.zeros(4 * L)
        bias[:L] = 1.0
        return cls(
            W=_uniform(rng, input_dim, (input_dim, 4 * L)),
            U=_uniform(rng, L, (L, 4 * L)),
            peep=_uniform(rng, L, (3, L)),
            bias=bias,
            gamma=np.ones((steps, L)),
            beta=np.zeros((steps, L)),
            running_mean=np.zeros((steps, L)),
            running_var=np.ones((steps, L)),
            **bn,
        )

    @classmethod
    def zeros(cls, input_dim: int, code_len: int, steps: int, **bn):
        L = code_len
        return cls(
            W=np.zeros((input_dim, 4 * L)),
            U=np.zeros((L, 4 * L)),
            peep=np.zeros((3, L)),
            bias=np.zeros(4 * L),
            gamma=np.zeros((steps, L)),
            beta=np.zeros((steps, L)),
            running_mean=np.zeros((steps, L)),
            running_var=np.ones((steps, L)),
            **bn,
        )

    def bn_state(self, step: int) -> BatchNormState:
        return BatchNormState(
            gamma=self.gamma[step],
            beta=self.beta[step],
            running_mean=self.running_mean[step],
            running_var=self.running_var[step],
            momentum=self.momentum,
            epsilon=self.epsilon,
        )


@dataclass
class BlstmTape:
    step: int
    mode: str
    binarizer: str
    z: np.ndarray
    b_prev: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    m: np.ndarray
    pre: np.ndarray  # cell value before batch norm
    c: np.ndarray
    h: np.ndarray
    bn_state: BatchNormState = field(repr=False)


def initial_code(batch: int, code_len: int) -> np.ndarray:
    return -np.ones((batch, code_len))


def blstm_step(p: BlstmParams, z, b_prev, c_prev, step: int, mode: str = "train", binarizer: str = "sgn"):
    """One binary-LSTM step over a batch.

    Peepholes act elementwise on ``c_prev`` for the three sigmoid gates; the
    candidate has none. The cell is batch-normalized with the statistics of
    time step ``step`` and ``h = o * c`` is emitted without an output tanh.

    Returns ``(h, b, c, tape)``; ``tape.bn_state`` carries the updated
    running statistics.
    """
    z = as_matrix(z)
    b_prev = as_matrix(b_prev)
    c_prev = as_matrix(c_prev)
    L = p.code_len
    if z.shape[1] != p.input_dim:
        raise ShapeError("blstm_step: input width", z.shape, p.W.shape)
    if b_prev.shape != (z.shape[0], L) or c_prev.shape != b_prev.shape:
        raise ShapeError("blstm_step: state shape", b_prev.shape, c_prev.shape, (z.shape[0], L))
    if not 0 <= step < p.steps:
        raise ShapeError(f"blstm_step: step {step} outside batch-norm table", p.gamma.shape)
    if (mode == "infer" or binarizer == "sgn") and not np.all(np.abs(b_prev) == 1.0):
        raise ValueError("blstm_step: previous code must lie in {-1, +1}")
    a = z @ p.W + b_prev @ p.U + p.bias
    a[:, : 3 * L] += np.tile(c_prev, 3) * p.peep.reshape(-1)
    f = sigmoid(a[:, :L])
    i = sigmoid(a[:, L : 2 * L])
    o = sigmoid(a[:, 2 * L : 3 * L])
    m = np.tanh(a[:, 3 * L :])
    pre = f * c_prev + i * m
    c, bn_state = batch_norm(pre, p.bn_state(step), mode)
    h = o * c
    b = binarize(h, binarizer, mode)
    tape = BlstmTape(step, mode, binarizer, z, b_prev, c_prev, f, i, o, m, pre, c, h, bn_state)
    return h, b, c, tape


def blstm_step_backward(p: BlstmParams, tape: BlstmTape, dh, db, dc):
    """Backward of :func:`blstm_step`.

    ``dh`` is the gradient reaching ``h`` directly, ``db`` the gradient
    reaching the emitted code; the latter passes the straight-through gate
    of the configured binarizer before joining ``dh``.

    Returns ``(grads, dz, db_prev, dc_prev)``. ``db_prev`` is *not* gated
    here: the step that produced ``b_prev`` applies its own gate.
    """
    if tape.mode != "train":
        raise ValueError("blstm_step_backward: tape was recorded in infer mode")
    shape = tape.h.shape
    if dh.shape != shape or db.shape != shape or dc.shape != shape:
        raise ShapeError("blstm_step_backward: upstream gradient", dh.shape, db.shape, dc.shape, shape)
    if p.code_len != shape[1]:
        raise ShapeError("blstm_step_backward: tape does not match params", shape, p.U.shape)
    L = p.code_len
    f, i, o, m = tape.f, tape.i, tape.o, tape.m
    dh = dh + db * binarize_grad(tape.h, tape.binarizer)
    do = dh * tape.c
    dc = dc + dh * o
    dpre, dgamma, dbeta = batch_norm_backward(dc, tape.pre, p.gamma[tape.step], p.epsilon)
    da_f = dpre * tape.c_prev * f * (1.0 - f)
    da_i = dpre * m * i * (1.0 - i)
    da_o = do * o * (1.0 - o)
    da_m = dpre * i * (1.0 - m**2)
    da = np.concatenate([da_f, da_i, da_o, da_m], axis=1)
    peep = p.peep
    dc_prev = dpre * f + da_f * peep[0] + da_i * peep[1] + da_o * peep[2]

    grads = p.zeros_like()
    grads.W = tape.z.T @ da
    grads.U = tape.b_prev.T @ da
    grads.peep = np.stack(
        [(da_f * tape.c_prev).sum(0), (da_i * tape.c_prev).sum(0), (da_o * tape.c_prev).sum(0)]
    )
    grads.bias = da.sum(axis=0)
    grads.gamma[tape.step] = dgamma
    grads.beta[tape.step] = dbeta
    dz = da @ p.W.T
    db_prev = da @ p.U.T
    return grads, dz, db_prev, dc_prev
