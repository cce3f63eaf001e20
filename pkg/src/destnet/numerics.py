"""Float64 tensor primitives every layer is built on.

Plain C-order numpy arrays are the tensor representation. All operations
here are pure functions; the only mutable object is :class:`AdamState`,
which is owned by exactly one trainer. Batched variants (leading batch
axis, sequences laid out as ``[batch, position, channel]``) back the
public single-tensor contracts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-extent check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise sigmoid, tanh, or relu."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation kind: {kind!r}")


def activation_grad(grad_out: np.ndarray, pre: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    """Backward of :func:`activation` given the forward input and output."""
    if kind == "sigmoid":
        return grad_out * out * (1.0 - out)
    if kind == "tanh":
        return grad_out * (1.0 - out * out)
    if kind == "relu":
        return grad_out * (pre > 0.0)
    raise ValueError(f"unknown activation kind: {kind!r}")


def masked_softmax(logits: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    """Exp-normalize over unmasked entries only; masked entries are exactly 0.

    Stable via max-subtraction over the unmasked entries. Batched: any shape,
    softmax taken along ``axis``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ValueError(f"logits/mask shapes differ: {logits.shape} vs {mask.shape}")
    if not mask.any(axis=axis).all():
        raise ValueError("softmax over fully masked axis")
    neg = np.where(mask, logits, -np.inf)
    shifted = neg - neg.max(axis=axis, keepdims=True)
    ex = np.where(mask, np.exp(shifted), 0.0)
    return ex / ex.sum(axis=axis, keepdims=True)


def softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Single-vector masked softmax (at least one position unmasked)."""
    logits = np.atleast_1d(np.asarray(logits, dtype=np.float64))
    mask = np.atleast_1d(np.asarray(mask, dtype=bool))
    return masked_softmax(logits, mask, axis=-1)


def masked_softmax_backward(grad_w: np.ndarray, weights: np.ndarray, axis: int = -1) -> np.ndarray:
    """d logits for w = masked_softmax(logits). Masked slots get zero grad."""
    inner = (grad_w * weights).sum(axis=axis, keepdims=True)
    return weights * (grad_w - inner)


def conv1d_bld(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 1-D convolution over ``x[batch, position, channel]``.

    ``kernels`` is ``[m, d, k]`` with odd k; output is ``[batch, position, m]``
    where position i aggregates input columns i-k//2 .. i+k//2, zero outside.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    m, d, k = kernels.shape
    if k % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {k}")
    if x.shape[-1] != d:
        raise ValueError(f"channel mismatch: input {x.shape[-1]}, kernel {d}")
    b, length = x.shape[0], x.shape[1]
    off = k // 2
    xp = np.zeros((b, length + 2 * off, d))
    xp[:, off:off + length] = x
    out = np.broadcast_to(bias, (b, length, m)).copy()
    for j in range(k):
        out += xp[:, j:j + length] @ kernels[:, :, j].T
    return out


def conv1d_bld_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray):
    """Gradients of :func:`conv1d_bld` wrt input, kernels, and bias."""
    m, d, k = kernels.shape
    b, length = x.shape[0], x.shape[1]
    off = k // 2
    xp = np.zeros((b, length + 2 * off, d))
    xp[:, off:off + length] = x
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    for j in range(k):
        dk[:, :, j] = np.einsum("blm,bld->md", grad_out, xp[:, j:j + length])
        dxp[:, j:j + length] += grad_out @ kernels[:, :, j]
    db = grad_out.sum(axis=(0, 1))
    return dxp[:, off:off + length], dk, db


def conv1d_same(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Single-sequence convolution: ``x[d, L]`` -> ``[m, L]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected [channels, length] input, got shape {x.shape}")
    out = conv1d_bld(x.T[None], kernels, bias)
    return out[0].T


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> np.ndarray:
    """One bias-corrected Adam update. Returns the new parameter tensor.

    ``state`` is mutated in place; non-finite gradients are rejected before
    any state change so a failed step leaves optimizer state intact.
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(
            f"param/grad/state shapes differ: {param.shape}, {grad.shape}, {state.m.shape}")
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient passed to adam_step")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(loss_and_grad, theta: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between analytic gradient and central differences.

    ``loss_and_grad(theta)`` returns ``(loss, grad)`` with ``grad`` shaped
    like ``theta``; only the loss part feeds the finite differences, so the
    two routes stay independent.
    """
    theta = np.asarray(theta, dtype=np.float64)
    _, analytic = loss_and_grad(theta)
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.zeros_like(theta)
    flat = theta.ravel().copy()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up, _ = loss_and_grad(flat.reshape(theta.shape))
        flat[i] = orig - h
        down, _ = loss_and_grad(flat.reshape(theta.shape))
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * h)
    return relative_grad_error(analytic, numeric)
