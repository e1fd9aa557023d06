"""Array primitives with hand-written adjoints.

Feature maps are channel-last (N, H, W, C); flat features are (N, F).
Conv weights are stored as (kh, kw, C_in, C_out) so a patch row of the
im2col matrix multiplies the reshaped weight directly.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes the upstream gradient plus that cache.
"""

import numpy as np

from ..errors import OddSpatialDim, ShapeMismatch


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=xp.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xp[:, i : i + span_h : stride, j : j + span_w : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,H,W,C) with ``w`` (kh,kw,C,O).

    Stride-1 convolutions with no more outputs than inputs multiply the
    padded input by all kernel taps at once and sum shifted slices of the
    (small) product; everything else goes through an im2col matrix.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weights {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    if stride == 1 and kh * kw > 1 and o <= c:
        hp, wp = xp.shape[1], xp.shape[2]
        flat = xp.reshape(n * hp * wp, c)
        taps = flat @ w.transpose(2, 0, 1, 3).reshape(c, kh * kw * o)
        taps = taps.reshape(n, hp, wp, kh * kw, o)
        out = np.zeros((n, ho, wo, o), dtype=taps.dtype)
        for i in range(kh):
            for j in range(kw):
                out += taps[:, i : i + ho, j : j + wo, i * kw + j, :]
        if b is not None:
            out += b
        return out, ("taps", flat, xp.shape, x.shape, w, pad, b is not None)
    if kh == 1 and kw == 1:
        cols = xp[:, : stride * ho : stride, : stride * wo : stride, :].reshape(n * ho * wo, c)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = cols @ w.reshape(-1, o)
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, o), ("cols", cols, x.shape, w, stride, pad, b is not None)


def _conv_taps_backward(dout, cache):
    _, flat, pshape, xshape, w, pad, has_bias = cache
    n, hp, wp, c = pshape
    kh, kw, _, o = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dtaps = np.zeros((n, hp, wp, kh * kw, o), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dtaps[:, i : i + ho, j : j + wo, i * kw + j, :] = dout
    dtaps = dtaps.reshape(n * hp * wp, kh * kw * o)
    wmat = w.transpose(2, 0, 1, 3).reshape(c, kh * kw * o)
    dw = (flat.T @ dtaps).reshape(c, kh, kw, o).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2)) if has_bias else None
    dxp = (dtaps @ wmat.T).reshape(pshape)
    h, wd = xshape[1], xshape[2]
    dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    return dx, np.ascontiguousarray(dw), db


def conv2d_backward(dout, cache):
    if cache[0] == "taps":
        return _conv_taps_backward(dout, cache)
    _, cols, xshape, w, stride, pad, has_bias = cache
    n, h, wd, c = xshape
    kh, kw, _, o = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(n * ho * wo, o)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0) if has_bias else None
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dx = (d2 @ w.reshape(c, o).T).reshape(xshape)
    elif stride == 1 and 2 * pad == kh - 1 and kh == kw:
        # "same" convolution: the input adjoint is a same-size correlation of
        # dout with the spatially flipped, channel-transposed kernel
        wt = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx, _ = conv2d_forward(dout, wt, None, 1, pad)
    else:
        dcols = (d2 @ w.reshape(-1, o).T).reshape(n, ho, wo, kh * kw, c)
        dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
        span_h = stride * (ho - 1) + 1
        span_w = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + span_h : stride, j : j + span_w : stride, :] += dcols[:, :, :, i * kw + j, :]
        dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def _pool_view(x):
    if x.ndim != 4:
        raise ShapeMismatch(f"pool: expected NHWC, got {x.shape}")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise OddSpatialDim(f"pool: spatial size {h}x{w} cannot be halved")
    h2, w2 = h // 2, w // 2
    # a trailing odd row/column is dropped (floor mode)
    return x[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c)


def avg_pool2_forward(x):
    return _pool_view(x).mean(axis=(2, 4)), x.shape


def avg_pool2_backward(dout, xshape):
    n, h2, w2, c = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    q = np.broadcast_to((dout * 0.25)[:, :, None, :, None, :], (n, h2, 2, w2, 2, c))
    dx[:, : 2 * h2, : 2 * w2, :] = q.reshape(n, 2 * h2, 2 * w2, c)
    return dx


def max_pool2_forward(x):
    v = _pool_view(x)
    n, h2, _, w2, _, c = v.shape
    flat = v.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def max_pool2_backward(dout, cache):
    xshape, idx = cache
    n, h2, w2, c = dout.shape
    flat = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(flat, idx[..., None], dout[..., None], axis=-1)
    g = flat.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, : 2 * h2, : 2 * w2, :] = g
    return dx


def _channel_dot(a, b):
    """Per-channel sum of ``a * b`` over every axis but the last."""
    sub = "abcd"[4 - a.ndim :]
    return np.einsum(f"{sub},{sub}->{sub[-1]}", a, b)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=0.9, eps=1e-5):
    """Per-channel normalization over every axis but the last.

    In training mode batch statistics are used and the running statistics
    are updated in place (``running = momentum * running + (1 - momentum) * batch``).
    The normalized input is never materialized: the output is ``x * scale + shift``
    and the backward pass works from ``x`` and per-channel sums.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeMismatch(f"bn: {x.shape} vs {gamma.shape[0]} channels")
    axes = tuple(range(x.ndim - 1))
    m = x.size // x.shape[-1]
    if train:
        mean = x.mean(axis=axes)
        centered_sq = _channel_dot(x, x) / m - mean * mean
        var = np.maximum(centered_sq, 0)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv).astype(x.dtype)
    shift = (beta - mean * gamma * inv).astype(x.dtype)
    out = x * scale
    out += shift
    return out, (x, mean, inv, gamma, train)


def batchnorm_backward(dout, cache):
    x, mean, inv, gamma, train = cache
    axes = tuple(range(dout.ndim - 1))
    m = dout.size // dout.shape[-1]
    dbeta = dout.sum(axis=axes)
    dgamma = inv * (_channel_dot(dout, x) - mean * dbeta)
    scale = gamma * inv
    if not train:
        return dout * scale.astype(dout.dtype), dgamma, dbeta
    # dx = scale * (dout - dbeta/m - xhat * dgamma/m), xhat = (x - mean) * inv
    coef_x = scale * inv * dgamma / m
    const = scale * (inv * dgamma * mean - dbeta) / m
    dx = dout * scale.astype(dout.dtype)
    dx -= x * coef_x.astype(dout.dtype)
    dx += const.astype(dout.dtype)
    return dx, dgamma.astype(dout.dtype), dbeta


def fc_forward(x, w, b):
    """``x`` (N,F) times ``w`` (F,O) plus ``b``."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"fc: input {x.shape} vs weights {w.shape}")
    return x @ w + b, (x, w)


def fc_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_backward(dout, logp):
    return dout - np.exp(logp) * dout.sum(axis=1, keepdims=True)


def nll_loss(logp, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logp``."""
    labels = np.asarray(labels)
    if logp.ndim != 2 or labels.shape != (logp.shape[0],):
        raise ShapeMismatch(f"nll: logp {logp.shape} vs labels {labels.shape}")
    n = logp.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogp = np.zeros_like(logp)
    dlogp[rows, labels] = -1.0 / n
    return float(loss), dlogp
