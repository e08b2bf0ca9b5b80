"""Numpy kernels for the layer graph: forward passes and their adjoints.

Convolutions go through im2col so the heavy lifting is a single BLAS matmul.
Each forward returns (output, cache); the matching backward consumes the cache
and returns the input gradient (plus parameter gradients when asked for).
All kernels preserve the dtype of their inputs so the same code serves the
float32 production path and the float64 gradient-check path.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from ..errors import InputShapeError

INV_SQRT2 = 0.7071067811865476
INV_SQRT_2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# conv2d


def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    # (n, ho, wo, c*kh*kw) contiguous copy for the matmul
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d_forward(x, w, b, stride=1, pad=0):
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise InputShapeError(f"conv2d expects NCHW input with {w.shape[1]} channels, got {x.shape}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride)
    out = cols @ w.reshape(w.shape[0], -1).T
    out += b
    n = x.shape[0]
    out = out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, stride, pad)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, w, cache, need_param_grads):
    padded_shape, cols, stride, pad = cache
    n, co, ho, wo = dout.shape
    kh, kw = w.shape[2], w.shape[3]
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, co)
    dw = db = None
    if need_param_grads:
        dw = (dmat.T @ cols).reshape(w.shape)
        db = dmat.sum(axis=0)
    dcols = dmat @ w.reshape(co, -1)
    dcols = dcols.reshape(n, ho, wo, w.shape[1], kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp, dw, db


# ---------------------------------------------------------------------------
# linear


def linear_forward(x, w, b):
    """Affine map over the last axis; works on (N, F) and (N, T, F) inputs."""
    if x.shape[-1] != w.shape[0]:
        raise InputShapeError(f"linear expects trailing dim {w.shape[0]}, got {x.shape}")
    return x @ w + b, x


def linear_backward(dout, w, x, need_param_grads):
    dw = db = None
    if need_param_grads:
        dw = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dout @ w.T, dw, db


# ---------------------------------------------------------------------------
# activations


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x, linearized=False):
    if linearized:
        # LinBP: backprop through the nonlinearity as identity
        return dout
    return np.where(x > 0, dout, 0)


def gelu_forward(x):
    out = 0.5 * x * (1.0 + erf(x * np.asarray(INV_SQRT2, dtype=x.dtype)))
    return out.astype(x.dtype, copy=False), x


def gelu_backward(dout, x):
    cdf = 0.5 * (1.0 + erf(x * np.asarray(INV_SQRT2, dtype=x.dtype)))
    pdf = np.exp(-0.5 * x * x) * np.asarray(INV_SQRT_2PI, dtype=x.dtype)
    return (dout * (cdf + x * pdf)).astype(x.dtype, copy=False)


def softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout, probs, axis=-1):
    inner = (dout * probs).sum(axis=axis, keepdims=True)
    return probs * (dout - inner)


# ---------------------------------------------------------------------------
# normalization


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return xhat * gamma + beta, (xhat, inv)


def layernorm_backward(dout, gamma, cache, need_param_grads):
    xhat, inv = cache
    dgamma = dbeta = None
    if need_param_grads:
        axes = tuple(range(dout.ndim - 1))
        dgamma = (dout * xhat).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    d = dout.shape[-1]
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


def batchnorm_frozen_forward(x, gamma, beta, mean, var, eps):
    # inference statistics only: attacks and eval must not touch running stats
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    out = x * scale[None, :, None, None] + shift[None, :, None, None]
    return out.astype(x.dtype, copy=False), scale


def batchnorm_frozen_backward(dout, cache, x, need_param_grads, mean, var, eps):
    scale = cache
    dgamma = dbeta = None
    if need_param_grads:
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        dbeta = dout.sum(axis=(0, 2, 3))
    return dout * scale[None, :, None, None], dgamma, dbeta


# ---------------------------------------------------------------------------
# pooling


def maxpool_forward(x, k=2):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise InputShapeError(f"maxpool{k} needs spatial dims divisible by {k}, got {x.shape}")
    ho, wo = h // k, w // k
    tiles = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = tiles.argmax(axis=-1)  # ties resolve to the first index: deterministic
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, k)


def maxpool_backward(dout, cache):
    idx, shape, k = cache
    n, c, h, w = shape
    ho, wo = h // k, w // k
    dtiles = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(dtiles, idx[..., None], dout[..., None], axis=-1)
    return dtiles.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def maxpool_spiking_forward(x, counts, k=2):
    """Max pooling over spike trains, gated by accumulated spike counts.

    Per-step max over binary-ish spikes behaves like an OR and inflates rates;
    passing the spike of the window's most active unit instead converges to
    the analog max of the underlying rates.
    """
    n, c, h, w = x.shape
    if h % k or w % k:
        raise InputShapeError(f"maxpool{k} needs spatial dims divisible by {k}, got {x.shape}")
    ho, wo = h // k, w // k
    tiles = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    counts = tiles if counts is None else counts + tiles
    idx = counts.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, k), counts


def avgpool_forward(x, k=None):
    """k=None performs global average pooling to (N, C)."""
    n, c, h, w = x.shape
    if k is None:
        return x.mean(axis=(2, 3)), x.shape
    if h % k or w % k:
        raise InputShapeError(f"avgpool{k} needs spatial dims divisible by {k}, got {x.shape}")
    out = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return out, x.shape


def avgpool_backward(dout, shape, k=None):
    n, c, h, w = shape
    if k is None:
        return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).astype(dout.dtype, copy=False)
    expanded = dout[:, :, :, None, :, None] / (k * k)
    return np.broadcast_to(expanded, (n, c, h // k, k, w // k, k)).reshape(n, c, h, w).astype(dout.dtype, copy=False)


# ---------------------------------------------------------------------------
# transformer pieces


def patch_embed_forward(x, w, b, cls_token, pos, patch):
    n, c, h, wd = x.shape
    if h % patch or wd % patch:
        raise InputShapeError(f"patch size {patch} does not divide spatial dims {h}x{wd}")
    gh, gw = h // patch, wd // patch
    patches = (
        x.reshape(n, c, gh, patch, gw, patch)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n, gh * gw, c * patch * patch)
    )
    tok = patches @ w + b
    cls = np.broadcast_to(cls_token.astype(x.dtype, copy=False), (n, 1, w.shape[1]))
    out = np.concatenate([cls, tok], axis=1) + pos
    return out.astype(x.dtype, copy=False), (patches, (n, c, h, wd), patch)


def patch_embed_backward(dout, w, cache, need_param_grads):
    patches, xshape, patch = cache
    n, c, h, wd = xshape
    gh, gw = h // patch, wd // patch
    dcls = dw = db = dpos = None
    dtok = dout[:, 1:, :]
    if need_param_grads:
        dpos = dout.sum(axis=0)
        dcls = dout[:, :1, :].sum(axis=0, keepdims=True)
        flat = patches.reshape(-1, patches.shape[-1])
        dw = flat.T @ dtok.reshape(-1, dtok.shape[-1])
        db = dtok.sum(axis=(0, 1))
    dpatches = dtok @ w.T
    dx = (
        dpatches.reshape(n, gh, gw, c, patch, patch)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(n, c, h, wd)
    )
    return np.ascontiguousarray(dx), dw, db, dcls, dpos


def attention_forward(x, params, heads):
    n, t, d = x.shape
    if d % heads:
        raise InputShapeError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=x.dtype)

    def split(m):
        return m.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ params["wq"] + params["bq"])
    k = split(x @ params["wk"] + params["bk"])
    v = split(x @ params["wv"] + params["bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    probs = softmax(scores, axis=-1)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    out = ctx @ params["wo"] + params["bo"]
    return out, (x, q, k, v, probs, scale)


def attention_backward(dout, params, cache, heads, need_param_grads, skip_attention=False):
    """skip_attention drops all gradient through the attention probabilities
    (the PNA surgery); value-path gradients still flow."""
    x, q, k, v, probs, scale = cache
    n, t, d = x.shape
    dh = d // heads

    def merge(m):
        return np.ascontiguousarray(m.transpose(0, 2, 1, 3)).reshape(n, t, d)

    def split(m):
        return m.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    grads = {}
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    if need_param_grads:
        flat_ctx = ctx.reshape(-1, d)
        grads["wo"] = flat_ctx.T @ dout.reshape(-1, d)
        grads["bo"] = dout.sum(axis=(0, 1))
    dctx = split(dout @ params["wo"].T)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dx = np.zeros_like(x)
    flat_x = x.reshape(-1, d)

    def proj_back(dmat, wkey, bkey):
        nonlocal dx
        dm = merge(dmat)
        if need_param_grads:
            grads[wkey] = flat_x.T @ dm.reshape(-1, d)
            grads[bkey] = dm.sum(axis=(0, 1))
        dx += dm @ params[wkey].T

    proj_back(dv, "wv", "bv")
    if not skip_attention:
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dscores = softmax_backward(dprobs, probs) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        proj_back(dq, "wq", "bq")
        proj_back(dk, "wk", "bk")
    elif need_param_grads:
        grads["wq"] = np.zeros_like(params["wq"])
        grads["bq"] = np.zeros_like(params["bq"])
        grads["wk"] = np.zeros_like(params["wk"])
        grads["bk"] = np.zeros_like(params["bk"])
    return dx, grads
