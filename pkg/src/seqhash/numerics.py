"""Dense numeric helpers: affine maps, activations, batch norm, gradient oracle.

Matrices are plain ``float64`` numpy arrays with one sample per row.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError("expected a 2-d matrix", x.shape)
    return x


def affine(x, W, b) -> np.ndarray:
    """Return ``x @ W + b`` with the bias broadcast over rows."""
    x = as_matrix(x)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError("affine: x.cols must equal W.rows", x.shape, W.shape)
    if b.shape != (W.shape[1],):
        raise ShapeError("affine: bias length must equal W.cols", b.shape, W.shape)
    return x @ W + b


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh}


def activate(x, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


@dataclass(frozen=True)
class BatchNormState:
    """Per-dimension affine parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")

    @property
    def dim(self) -> int:
        return int(np.shape(self.gamma)[0])

    @classmethod
    def fresh(cls, dim: int, momentum: float = 0.9, epsilon: float = 1e-5):
        return cls(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
            epsilon=epsilon,
        )


def batch_norm(x, state: BatchNormState, mode: str = "train"):
    """Normalize columns of ``x``.

    Returns ``(y, new_state)``. Train mode uses the (biased) batch
    statistics and folds them into the running averages; infer mode reads
    the running averages only. ``state`` itself is never mutated.
    """
    x = as_matrix(x)
    if x.shape[1] != state.dim:
        raise ShapeError("batch_norm: column count", x.shape, (state.dim,))
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batch_norm: train mode needs at least 2 rows", x.shape)
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        mom = state.momentum
        new_state = replace(
            state,
            running_mean=mom * state.running_mean + (1.0 - mom) * mean,
            running_var=mom * state.running_var + (1.0 - mom) * var,
        )
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
        new_state = state
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    xhat = (x - mean) / np.sqrt(var + state.epsilon)
    return state.gamma * xhat + state.beta, new_state


def batch_norm_backward(dy, x, gamma, epsilon: float):
    """Gradients of train-mode batch norm.

    Returns ``(dx, dgamma, dbeta)``; batch statistics are recomputed from
    ``x`` exactly as the forward pass did.
    """
    x = as_matrix(x)
    n = x.shape[0]
    mean = x.mean(axis=0)
    inv_std = 1.0 / np.sqrt(x.var(axis=0) + epsilon)
    xhat = (x - mean) * inv_std
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``x`` may have any shape; the result has the same shape.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f(x))
        flat[k] = orig - eps
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def group_rel_error(a, b) -> float:
    """Norm-wise relative error ``||a-b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
