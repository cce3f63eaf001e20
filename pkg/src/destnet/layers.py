"""Forward/backward pairs for every differentiable layer.

Each layer exposes ``*_forward`` returning (output, cache) and a matching
``*_backward`` that maps the output gradient plus the cache to input and
parameter gradients. Sequences are ``[batch, position, channel]`` float64
arrays; masks are ``[batch, position]`` booleans with the real events in the
unmasked prefix.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    activation,
    activation_grad,
    masked_softmax,
    masked_softmax_backward,
    sigmoid,
)


# --- embedding lookups -----------------------------------------------------

def embed_lookup_forward(table: np.ndarray, ids: np.ndarray):
    """Row lookup; works for any id-array shape, appends the embed axis."""
    return table[ids], ids


def embed_lookup_backward(grad_out: np.ndarray, ids: np.ndarray, table_shape) -> np.ndarray:
    grad = np.zeros(table_shape)
    np.add.at(grad, ids.ravel(), grad_out.reshape(-1, table_shape[1]))
    return grad


def sequence_embed_forward(city_table: np.ndarray, unit_table: np.ndarray,
                           city_ids: np.ndarray, unit_ids: np.ndarray, mask: np.ndarray):
    """Concat(city row, action-unit row) per position, zeroed where masked."""
    x = np.concatenate([city_table[city_ids], unit_table[unit_ids]], axis=-1)
    x *= mask[..., None]
    return x, (city_ids, unit_ids, mask, city_table.shape, unit_table.shape)


def sequence_embed_backward(grad_x: np.ndarray, cache):
    city_ids, unit_ids, mask, city_shape, unit_shape = cache
    d_e = city_shape[1]
    grad_x = grad_x * mask[..., None]
    d_city = np.zeros(city_shape)
    d_unit = np.zeros(unit_shape)
    np.add.at(d_city, city_ids.ravel(), grad_x[..., :d_e].reshape(-1, d_e))
    np.add.at(d_unit, unit_ids.ravel(), grad_x[..., d_e:].reshape(-1, d_e))
    return d_city, d_unit


# --- time transform ----------------------------------------------------------

def time_embed_forward(tau: np.ndarray, w_b: np.ndarray):
    """tanh(w_b * log(1+|tau|)) per position; tau in days, w_b shape [d_t]."""
    u = np.log1p(np.abs(tau))
    t = np.tanh(u[..., None] * w_b)
    return t, (u, t)


def time_embed_backward(grad_t: np.ndarray, cache) -> np.ndarray:
    u, t = cache
    pre = grad_t * (1.0 - t * t)
    return np.einsum("bld,bl->d", pre, u)


# --- GRU encoder -------------------------------------------------------------

def gru_init(rng: np.random.Generator, d_in: int, d_h: int) -> dict[str, np.ndarray]:
    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    p = {}
    for gate in ("z", "r", "h"):
        p[f"w{gate}"] = glorot(d_in, d_h)
        p[f"u{gate}"] = glorot(d_h, d_h)
        p[f"b{gate}"] = np.zeros(d_h)
    return p


def gru_forward(x: np.ndarray, mask: np.ndarray, p: dict[str, np.ndarray]):
    """Standard gated recurrence, h_0 = 0; masked steps copy the state forward."""
    b, length, _ = x.shape
    d_h = p["uz"].shape[0]
    h = np.zeros((b, d_h))
    hs = np.empty((b, length, d_h))
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    hcs = np.empty_like(hs)
    prevs = np.empty_like(hs)
    m = mask.astype(np.float64)[..., None]
    for t in range(length):
        xt = x[:, t]
        z = sigmoid(xt @ p["wz"] + h @ p["uz"] + p["bz"])
        r = sigmoid(xt @ p["wr"] + h @ p["ur"] + p["br"])
        hc = np.tanh(xt @ p["wh"] + (r * h) @ p["uh"] + p["bh"])
        core = (1.0 - z) * h + z * hc
        prevs[:, t] = h
        h = m[:, t] * core + (1.0 - m[:, t]) * h
        hs[:, t], zs[:, t], rs[:, t], hcs[:, t] = h, z, r, hc
    return hs, (x, m, zs, rs, hcs, prevs)


def gru_backward(grad_h: np.ndarray, cache, p: dict[str, np.ndarray]):
    x, m, zs, rs, hcs, prevs = cache
    length = x.shape[1]
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dx = np.zeros_like(x)
    carry = np.zeros_like(grad_h[:, 0])
    for t in range(length - 1, -1, -1):
        dh = grad_h[:, t] + carry
        mt = m[:, t]
        z, r, hc, hp = zs[:, t], rs[:, t], hcs[:, t], prevs[:, t]
        xt = x[:, t]
        dcore = dh * mt
        dhp = dh * (1.0 - mt)
        dz = dcore * (hc - hp)
        dhc = dcore * z
        dhp = dhp + dcore * (1.0 - z)
        dah = dhc * (1.0 - hc * hc)
        grads["wh"] += xt.T @ dah
        grads["uh"] += (r * hp).T @ dah
        grads["bh"] += dah.sum(axis=0)
        drh = dah @ p["uh"].T
        dr = drh * hp
        dhp = dhp + drh * r
        dxt = dah @ p["wh"].T
        daz = dz * z * (1.0 - z)
        grads["wz"] += xt.T @ daz
        grads["uz"] += hp.T @ daz
        grads["bz"] += daz.sum(axis=0)
        dxt += daz @ p["wz"].T
        dhp = dhp + daz @ p["uz"].T
        dar = dr * r * (1.0 - r)
        grads["wr"] += xt.T @ dar
        grads["ur"] += hp.T @ dar
        grads["br"] += dar.sum(axis=0)
        dxt += dar @ p["wr"].T
        dhp = dhp + dar @ p["ur"].T
        dx[:, t] = dxt
        carry = dhp
    return dx, grads


# --- multi-grained convolution ----------------------------------------------

def conv_grain_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                       mask: np.ndarray, act: str):
    """Same-padded convolution of one grain, activated, masked zero-in/zero-out."""
    m, d, k = kernels.shape
    b, length, _ = x.shape
    off = k // 2
    xz = x * mask[..., None]
    xp = np.zeros((b, length + 2 * off, d))
    xp[:, off:off + length] = xz
    pre = np.broadcast_to(bias, (b, length, m)).copy()
    for j in range(k):
        pre += xp[:, j:j + length] @ kernels[:, :, j].T
    out = activation(pre, act) * mask[..., None]
    return out, (xp, pre, out, mask, off)


def conv_grain_backward(grad_out: np.ndarray, cache, kernels: np.ndarray, act: str):
    xp, pre, out, mask, off = cache
    length = pre.shape[1]
    # grad_out is masked first, so the zeroed-out cached activations are safe
    # to reuse in the derivative at masked positions.
    grad_out = grad_out * mask[..., None]
    dpre = activation_grad(grad_out, pre, out, act)
    dk = np.zeros_like(kernels)
    dxp = np.zeros_like(xp)
    for j in range(kernels.shape[2]):
        dk[:, :, j] = np.einsum("blm,bld->md", dpre, xp[:, j:j + length])
        dxp[:, j:j + length] += dpre @ kernels[:, :, j]
    db = dpre.sum(axis=(0, 1))
    dx = dxp[:, off:off + length] * mask[..., None]
    return dx, dk, db


# --- status-aware attention ---------------------------------------------------

def attention_forward(x_o: np.ndarray, states: np.ndarray, t_emb: np.ndarray,
                      mask: np.ndarray, w_a: np.ndarray):
    """Bilinear status scores over [state; time] columns, softmax, weighted sum.

    score_i = x_o^T W_a [state_i; T_i]; the sum weights the states only.
    """
    d_s = states.shape[-1]
    q = x_o @ w_a
    q_s, q_t = q[:, :d_s], q[:, d_s:]
    logits = np.einsum("bld,bd->bl", states, q_s) + np.einsum("bld,bd->bl", t_emb, q_t)
    weights = masked_softmax(logits, mask, axis=1)
    a_t = np.einsum("bl,bld->bd", weights, states)
    return a_t, weights, (x_o, states, t_emb, q_s, q_t, weights, w_a)


def attention_backward(grad_a: np.ndarray, cache):
    x_o, states, t_emb, q_s, q_t, weights, w_a = cache
    d_alpha = np.einsum("bd,bld->bl", grad_a, states)
    d_states = weights[..., None] * grad_a[:, None, :]
    d_logits = masked_softmax_backward(d_alpha, weights, axis=1)
    d_qs = np.einsum("bl,bld->bd", d_logits, states)
    d_qt = np.einsum("bl,bld->bd", d_logits, t_emb)
    d_states += d_logits[..., None] * q_s[:, None, :]
    d_t = d_logits[..., None] * q_t[:, None, :]
    d_q = np.concatenate([d_qs, d_qt], axis=1)
    d_wa = x_o.T @ d_q
    d_xo = d_q @ w_a.T
    return d_states, d_t, d_xo, d_wa


# --- pooling and dense stack ---------------------------------------------------

def masked_mean_forward(x: np.ndarray, mask: np.ndarray):
    counts = mask.sum(axis=1).astype(np.float64)
    out = (x * mask[..., None]).sum(axis=1) / counts[:, None]
    return out, (mask, counts)


def masked_mean_backward(grad_out: np.ndarray, cache, length: int) -> np.ndarray:
    mask, counts = cache
    scale = mask / counts[:, None]
    return scale[..., None] * grad_out[:, None, :]


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, act: str | None):
    pre = x @ w + b
    out = activation(pre, act) if act else pre
    return out, (x, pre, out)


def dense_backward(grad_out: np.ndarray, cache, w: np.ndarray, act: str | None):
    x, pre, out = cache
    dpre = activation_grad(grad_out, pre, out, act) if act else grad_out
    dw = x.T @ dpre
    db = dpre.sum(axis=0)
    dx = dpre @ w.T
    return dx, dw, db
