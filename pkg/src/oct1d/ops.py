"""Differentiable primitives over ``(batch, time, channels)`` tensors.

Every op takes and returns :class:`~oct1d.tensor.Tensor` values. When a
:class:`~oct1d.tensor.Tape` is active the op records a closure computing the
vector-Jacobian product for each parent.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DegenerateLengthError, NonFiniteError, ShapeError, Tensor, make_result


class LabelRangeError(ValueError):
    """Raised when a class label is outside ``[0, num_classes)``."""


def _check_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op}: expected rank {rank}, got shape {x.shape}")


def same_padding(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation).

    ``x`` is (B, T, Cin), ``w`` is (K, Cin, Cout). The input is zero padded
    with ``(K-1)//2`` samples on the left and the rest on the right, so the
    output keeps length T for every K, including K > T.
    """
    _check_rank(x, 3, "conv1d")
    _check_rank(w, 3, "conv1d")
    B, T, cin = x.shape
    K, wcin, cout = w.shape
    if K < 1:
        raise ShapeError("conv1d: kernel size must be >= 1")
    if wcin != cin:
        raise ShapeError(f"conv1d: input has {cin} channels, kernel expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {b.shape} != ({cout},)")

    left, right = same_padding(K)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    # (B, T, Cin, K) -> (B*T, K*Cin) matching w.reshape(K*Cin, Cout)
    cols = sliding_window_view(xp, K, axis=1).transpose(0, 1, 3, 2).reshape(B * T, K * cin)
    wmat = w.data.reshape(K * cin, cout)
    y = cols @ wmat
    if b is not None:
        y += b.data
    y = y.reshape(B, T, cout)

    def backward(g):
        g2 = g.reshape(B * T, cout)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, T, K, cin)
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[:, k:k + T] += dcols[:, :, k]
            gx = dxp[:, left:left + T]
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(K, cin, cout)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(y, parents, backward)


def avg_pool1d(x: Tensor) -> Tensor:
    """Average pool with kernel 2 and stride 2; odd lengths drop the last step."""
    _check_rank(x, 3, "avg_pool1d")
    T = x.shape[1]
    if T < 2:
        raise DegenerateLengthError(f"avg_pool1d needs T >= 2, got {T}")
    n = T // 2
    xd = x.data
    y = (xd[:, 0:2 * n:2] + xd[:, 1:2 * n:2]) / 2

    def backward(g):
        gx = np.zeros_like(xd)
        half = g / 2
        gx[:, 0:2 * n:2] = half
        gx[:, 1:2 * n:2] = half
        return (gx,)

    return make_result(y, (x,), backward)


def upsample1d_nearest(x: Tensor, target_len: int) -> Tensor:
    """Nearest-neighbour upsampling by 2, to ``target_len`` in {2T, 2T+1}.

    For an odd target the final position repeats the last input step.
    """
    _check_rank(x, 3, "upsample1d_nearest")
    T = x.shape[1]
    if target_len not in (2 * T, 2 * T + 1):
        raise ShapeError(f"upsample1d_nearest: target {target_len} not in {{{2 * T}, {2 * T + 1}}}")
    idx = np.arange(target_len) // 2
    idx[idx >= T] = T - 1
    y = x.data[:, idx]

    def backward(g):
        gx = g[:, 0:2 * T:2] + g[:, 1:2 * T:2]
        if target_len == 2 * T + 1:
            gx = gx.copy()
            gx[:, -1] += g[:, -1]
        return (gx,)

    return make_result(y, (x,), backward)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel normalization over the batch and time axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place with an exponential moving average (``momentum`` is
    the weight on the old value). Inference mode uses the buffers.
    """
    _check_rank(x, 3, "batch_norm1d")
    C = x.shape[2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm1d: gamma/beta must be ({C},)")
    xd = x.data
    if training:
        with np.errstate(over="ignore", invalid="ignore"):
            mean = xd.mean(axis=(0, 1))
            var = xd.var(axis=(0, 1))
        if not (np.isfinite(mean).all() and np.isfinite(var).all()):
            raise NonFiniteError("batch_norm1d: batch statistics are not finite")
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    y = xhat * gamma.data + beta.data
    m = xd.shape[0] * xd.shape[1]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 1)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 1)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                gx = (inv_std / m) * (
                    m * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
                )
            else:
                gx = dxhat * inv_std
        return gx, gg, gb

    return make_result(y, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(y, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: identity at inference, scaled mask in training."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    y = x.data * keep

    def backward(g):
        return (g * keep,)

    return make_result(y, (x,), backward)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    _check_rank(x, 2, "dense")
    if w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(y, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the time axis: (B, T, C) -> (B, C)."""
    _check_rank(x, 3, "global_avg_pool")
    T = x.shape[1]
    y = x.data.mean(axis=1)

    def backward(g):
        return (np.broadcast_to(g[:, None, :] / T, x.shape).copy(),)

    return make_result(y, (x,), backward)


def dimension_shuffle(x: Tensor) -> Tensor:
    """Swap the time and channel axes: (B, Q, M) -> (B, M, Q)."""
    _check_rank(x, 3, "dimension_shuffle")
    y = np.ascontiguousarray(x.data.transpose(0, 2, 1))

    def backward(g):
        return (g.transpose(0, 2, 1),)

    return make_result(y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    y = a.data + b.data

    def backward(g):
        return g, g

    return make_result(y, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    y = a.data * b.data

    def backward(g):
        return g * b.data, g * a.data

    return make_result(y, (a, b), backward)


def tensor_sum(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum())

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_result(y, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in xs]
    y = np.concatenate(arrays, axis=axis)
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(y, tuple(xs), backward)


def take_last(x: Tensor) -> Tensor:
    """Last time step of a (B, T, H) sequence."""
    _check_rank(x, 3, "take_last")
    y = x.data[:, -1].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, -1] = g
        return (gx,)

    return make_result(y, (x,), backward)


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm(x: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Single-layer LSTM over (B, T, C) returning all hidden states (B, T, H).

    Gate blocks in ``w`` (C, 4H), ``u`` (H, 4H) and ``b`` (4H,) are ordered
    input, forget, candidate, output. Initial hidden and cell states are zero.
    """
    _check_rank(x, 3, "lstm")
    B, T, C = x.shape
    H = u.shape[0]
    if w.shape != (C, 4 * H) or u.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: bad parameter shapes w{w.shape} u{u.shape} b{b.shape} for C={C}")
    xd, wd, ud, bd = x.data, w.data, u.data, b.data
    dtype = xd.dtype
    zx = xd @ wd + bd  # (B, T, 4H)
    hs = np.zeros((B, T + 1, H), dtype=dtype)
    cs = np.zeros((B, T + 1, H), dtype=dtype)
    gates = np.empty((B, T, 4 * H), dtype=dtype)
    for t in range(T):
        z = zx[:, t] + hs[:, t] @ ud
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        c_hat = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        cs[:, t + 1] = f * cs[:, t] + i * c_hat
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t] = np.concatenate([i, f, c_hat, o], axis=1)
    y = hs[:, 1:].copy()

    def backward(g):
        dz = np.empty_like(gates)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in reversed(range(T)):
            i = gates[:, t, :H]
            f = gates[:, t, H:2 * H]
            c_hat = gates[:, t, 2 * H:3 * H]
            o = gates[:, t, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            dz[:, t, :H] = dc * c_hat * i * (1 - i)
            dz[:, t, H:2 * H] = dc * cs[:, t] * f * (1 - f)
            dz[:, t, 2 * H:3 * H] = dc * i * (1 - c_hat * c_hat)
            dz[:, t, 3 * H:] = dh * tc * o * (1 - o)
            dh_next = dz[:, t] @ ud.T
            dc_next = dc * f
        gx = dz @ wd.T if x.requires_grad else None
        gw = xd.reshape(B * T, C).T @ dz.reshape(B * T, 4 * H) if w.requires_grad else None
        gu = hs[:, :T].reshape(B * T, H).T @ dz.reshape(B * T, 4 * H) if u.requires_grad else None
        gb = dz.sum(axis=(0, 1)) if b.requires_grad else None
        return gx, gw, gu, gb

    return make_result(y, (x, w, u, b), backward)


def _softmax_last(e: np.ndarray) -> np.ndarray:
    e = e - e.max(axis=-1, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=-1, keepdims=True)


def attention_weights(states: np.ndarray, w: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Additive alignment weights softmax_t(v . tanh(W s_t + b)), shape (B, T)."""
    return _softmax_last(np.tanh(states @ w + b) @ v)


def attention_context(states: Tensor, w: Tensor, b: Tensor, v: Tensor) -> Tensor:
    """Attention-weighted sum of (B, T, H) states -> (B, H)."""
    _check_rank(states, 3, "attention_context")
    H = states.shape[2]
    if w.ndim != 2 or w.shape[0] != H or b.shape != (w.shape[1],) or v.shape != (w.shape[1],):
        raise ShapeError("attention_context: bad parameter shapes")
    s = states.data
    u = np.tanh(s @ w.data + b.data)  # (B, T, A)
    a = _softmax_last(u @ v.data)  # (B, T)
    y = np.einsum("bt,bth->bh", a, s)

    def backward(g):
        da = np.einsum("bth,bh->bt", s, g)
        de = a * (da - (a * da).sum(axis=1, keepdims=True))
        gv = np.einsum("bt,bta->a", de, u) if v.requires_grad else None
        dpre = de[:, :, None] * v.data * (1 - u * u)
        gw = np.einsum("bth,bta->ha", s, dpre) if w.requires_grad else None
        gb = dpre.sum(axis=(0, 1)) if b.requires_grad else None
        gs = None
        if states.requires_grad:
            gs = a[:, :, None] * g[:, None, :] + dpre @ w.data.T
        return gs, gw, gb, gv

    return make_result(y, (states, w, b, v), backward)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a (B, K) array or Tensor (not recorded)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return _softmax_last(data)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    _check_rank(logits, 2, "softmax_cross_entropy")
    B, K = logits.shape
    if K < 2:
        raise ShapeError("softmax_cross_entropy needs at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelRangeError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(B), labels] - logsumexp
    loss = np.asarray(-logp.mean())

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return make_result(loss, (logits,), backward)
