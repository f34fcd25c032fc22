"""Differentiable primitives used by the text reading network.

All image tensors are channels-last: ``[batch, height, width, channels]``.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (DimensionError, NumericError, Tensor, _sigmoid_np, as_tensor,
                     make_result, unbroadcast)


# --------------------------------------------------------------- convolution
def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation over an NHWC input with a ``[kh, kw, Cin, Cout]`` kernel.

    ``same`` padding follows the asymmetric convention (extra row/column at
    the bottom/right), so the output is ``ceil(H / stride)``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("same padding requires odd kernel sizes")
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
        if ho < 1 or wo < 1:
            raise DimensionError("valid convolution larger than input")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xd, wd = x.data, kernel.data
    wmat = wd.reshape(kh * kw * cin, cout)
    pointwise = kh == 1 and kw == 1 and stride == 1
    if pointwise:
        cols = xd.reshape(-1, cin)
    else:
        xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gm = g.reshape(-1, cout)
        gx = gw = gb = None
        if kernel.requires_grad:
            gw = (cols.T @ gm).reshape(kh, kw, cin, cout)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gcols = gm @ wmat.T
            if pointwise:
                gx = gcols.reshape(n, h, w, cin)
            else:
                gcols = gcols.reshape(n, ho, wo, kh, kw, cin)
                gxp = np.zeros((n, h + pt + pb, w + pl + pr, cin), dtype=xd.dtype)
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, :, a, b]
                gx = gxp[:, pt:pt + h, pl:pl + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, bw)


# ---------------------------------------------------------------- recurrent
def gru_step(gx: Tensor, h_prev: Tensor, w_h: Tensor, b_h: Tensor) -> Tensor:
    """One GRU update given the precomputed input projection ``gx = x @ W_x + b_x``.

    Gate layout along the last axis of ``gx``/``w_h`` is ``[reset, update, candidate]``.
    """
    dh = h_prev.shape[-1]
    if gx.shape[-1] != 3 * dh or w_h.shape != (dh, 3 * dh):
        raise DimensionError(f"gru shapes inconsistent: gx {gx.shape}, h {h_prev.shape}, W_h {w_h.shape}")
    for label, t in (("x", gx), ("h_prev", h_prev)):
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite values in GRU input {label!r}")
    gxd, hd, whd = gx.data, h_prev.data, w_h.data
    gh = hd @ whd + b_h.data
    r = _sigmoid_np(gxd[:, :dh] + gh[:, :dh])
    z = _sigmoid_np(gxd[:, dh:2 * dh] + gh[:, dh:2 * dh])
    hn = gh[:, 2 * dh:]
    cand = np.tanh(gxd[:, 2 * dh:] + r * hn)
    out = (1.0 - z) * cand + z * hd

    def bw(g):
        d_cand = g * (1.0 - z)
        dz = g * (hd - cand)
        d_npre = d_cand * (1.0 - cand * cand)
        dr = d_npre * hn
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        dgx = np.concatenate([dr_pre, dz_pre, d_npre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, d_npre * r], axis=1)
        dh_prev = g * z + dgh @ whd.T if h_prev.requires_grad else None
        dwh = hd.T @ dgh if w_h.requires_grad else None
        dbh = dgh.sum(axis=0) if b_h.requires_grad else None
        return dgx, dh_prev, dwh, dbh

    return make_result(out, (gx, h_prev, w_h, b_h), bw)


def gru_cell(x: Tensor, h_prev: Tensor, params: dict) -> Tensor:
    """Standard GRU cell; ``params`` holds ``w_x [Din,3Dh]``, ``w_h [Dh,3Dh]``, ``b_x``, ``b_h``."""
    if x.shape[-1] != params["w_x"].shape[0]:
        raise DimensionError(f"GRU input width {x.shape[-1]} != {params['w_x'].shape[0]}")
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite values in GRU input 'x'")
    gx = x @ params["w_x"] + params["b_x"]
    return gru_step(gx, h_prev, params["w_h"], params["b_h"])


# ------------------------------------------------------------- activations
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


# ------------------------------------------------------------------ losses
def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise ``0.5 x^2`` for ``|x| < 1``, else ``|x| - 0.5``."""
    xd = x.data
    ax = np.abs(xd)
    small = ax < 1.0
    out = np.where(small, 0.5 * xd * xd, ax - 0.5).astype(xd.dtype)
    return make_result(out, (x,), lambda g: (g * np.where(small, xd, np.sign(xd)),))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean softmax cross-entropy over the rows of ``logits [M, K]``.

    ``targets`` is either integer class labels ``[M]`` or target
    probabilities ``[M, K]``. Rows with ``mask == 0`` are excluded; the mean
    is over the remaining rows (zero when none remain).
    """
    targets = np.asarray(targets)
    m, k = logits.shape
    if np.issubdtype(targets.dtype, np.integer):
        if targets.shape != (m,):
            raise DimensionError(f"label shape {targets.shape} != ({m},)")
        if m and (targets.min() < 0 or targets.max() >= k):
            raise ValueError("class label out of range")
        probs = np.zeros((m, k), dtype=logits.dtype)
        probs[np.arange(m), targets] = 1.0
    else:
        if targets.shape != (m, k):
            raise DimensionError(f"target shape {targets.shape} != {(m, k)}")
        if not np.all((targets >= 0.0) & (targets <= 1.0)):
            raise ValueError("target probabilities must lie in [0, 1]")
        probs = targets.astype(logits.dtype)
    w = np.ones(m, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = float(w.sum())
    if count == 0:
        return make_result(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    logp = log_softmax(logits, axis=-1)
    weighted = probs * (w / count)[:, None]
    return -(logp * weighted).sum()


def binary_cross_entropy_with_logits(logits: Tensor, targets, weights) -> Tensor:
    """Weighted sum of binary cross-entropy terms, computed stably from logits."""
    t = np.asarray(targets, dtype=logits.dtype)
    if not np.all((t >= 0.0) & (t <= 1.0)):
        raise ValueError("binary targets must lie in [0, 1]")
    w = np.asarray(weights, dtype=logits.dtype)
    zd = logits.data
    # log(1 + exp(-|z|)) + max(z, 0) - z t
    out = (w * (np.logaddexp(0.0, -np.abs(zd)) + np.maximum(zd, 0.0) - zd * t)).sum()
    p = _sigmoid_np(zd)
    return make_result(np.asarray(out, dtype=logits.dtype), (logits,),
                       lambda g: (g * w * (p - t),))


# ----------------------------------------------------------- normalization
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, mask: np.ndarray | None = None) -> Tensor:
    """Normalize over every axis but the last.

    In training mode the batch statistics are used (restricted to positions
    where ``mask`` is nonzero, if given) and the running averages updated;
    otherwise the running averages are used.
    """
    c = x.shape[-1]
    xd = x.data
    eps = state.eps
    if not training:
        scale = gamma.data / np.sqrt(state.var + eps)
        shift = beta.data - state.mean * scale
        out = xd * scale + shift
        xhat = (xd - state.mean) / np.sqrt(state.var + eps)

        def bw_eval(g):
            gr = g.reshape(-1, c)
            return (g * scale, (gr * xhat.reshape(-1, c)).sum(0), gr.sum(0))

        return make_result(out.astype(xd.dtype), (x, gamma, beta), bw_eval)

    flat = xd.reshape(-1, c)
    if mask is None:
        wts = None
        count = flat.shape[0]
        mu = flat.mean(axis=0)
        var = ((flat - mu) ** 2).mean(axis=0)
    else:
        wts = np.broadcast_to(np.asarray(mask, dtype=xd.dtype), xd.shape[:-1]).reshape(-1, 1)
        count = float(wts.sum())
        mu = (flat * wts).sum(axis=0) / count
        var = (((flat - mu) ** 2) * wts).sum(axis=0) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv
    out = (xhat * gamma.data + beta.data).reshape(xd.shape)
    mom = state.momentum
    state.mean = (mom * state.mean + (1 - mom) * mu).astype(state.mean.dtype)
    state.var = (mom * state.var + (1 - mom) * var).astype(state.var.dtype)

    def bw(g):
        gr = g.reshape(-1, c)
        dgamma = (gr * xhat).sum(axis=0)
        dbeta = gr.sum(axis=0)
        dxhat = gr * gamma.data
        if wts is None:
            dx = inv / count * (count * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
        else:
            s1 = dxhat.sum(0)
            s2 = (dxhat * xhat).sum(0)
            dx = inv / count * (count * dxhat - wts * s1 - wts * xhat * s2)
        return dx.reshape(xd.shape), dgamma, dbeta

    return make_result(out.astype(xd.dtype), (x, gamma, beta), bw)


# -------------------------------------------------------------- resampling
def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Linear interpolation weights, half-pixel centers (align_corners=False)."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor.

    Output pixel ``o`` samples source coordinate ``(o + 0.5) / factor - 0.5``
    clamped to the valid range (the align_corners=False convention).
    """
    if factor == 1:
        return x
    n, h, w, c = x.shape
    ry = _interp_matrix(h, factor, x.dtype)
    rx = _interp_matrix(w, factor, x.dtype)
    out = np.einsum("ah,nhwc->nawc", ry, x.data)
    out = np.einsum("bw,nawc->nabc", rx, out)

    def bw(g):
        gy = np.einsum("bw,nabc->nawc", rx, g)
        return (np.einsum("ah,nawc->nhwc", ry, gy),)

    return make_result(out, (x,), bw)


def bilinear_sample_matrix(feat_shape: tuple[int, int, int], batch_idx: np.ndarray,
                           ys: np.ndarray, xs: np.ndarray) -> sp.csr_matrix:
    """Sparse ``[M, N*H*W]`` matrix of kernel weights ``K(x - m) K(y - n)``.

    ``K(d) = max(0, 1 - |d|)``; neighbours that fall outside the map carry
    no weight, which is the same as sampling zeros there.
    """
    n, h, w = feat_shape
    m = len(xs)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    rows, cols, vals = [], [], []
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            wgt = np.maximum(0.0, 1.0 - np.abs(xs - xx)) * np.maximum(0.0, 1.0 - np.abs(ys - yy))
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h) & (wgt > 0)
            rows.append(np.nonzero(ok)[0])
            cols.append((batch_idx[ok] * h + yy[ok]) * w + xx[ok])
            vals.append(wgt[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(m, n * h * w))


def sparse_gather(feat: Tensor, matrix: sp.csr_matrix) -> Tensor:
    """Rows of ``matrix @ feat.reshape(-1, C)``; linear in ``feat``."""
    n, h, w, c = feat.shape
    mat = matrix.astype(feat.dtype)
    out = np.asarray(mat @ feat.data.reshape(-1, c))
    mat_t = mat.T.tocsr()
    return make_result(out, (feat,), lambda g: (np.asarray(mat_t @ g).reshape(n, h, w, c),))


# ------------------------------------------------------------------ helpers
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


__all__ = [
    "BatchNormState", "batch_norm", "bilinear_sample_matrix", "binary_cross_entropy_with_logits",
    "conv2d", "cross_entropy", "gru_cell", "gru_step", "he_uniform", "linear", "log_softmax",
    "relu", "sigmoid", "smooth_l1", "softmax", "sparse_gather", "unbroadcast", "upsample_bilinear",
    "as_tensor",
]
