"""Vectorised numpy fallback for the compiled kernels in ``_kernels.pyx``.

Signatures and numerical conventions match the Cython module one-for-one.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

COS_EPS = 1e-8


def _softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sem_aggregate(tokens, cls, mask, alpha):
    tokens = np.ascontiguousarray(tokens, dtype=np.float64)
    ncls = np.maximum(np.linalg.norm(cls, axis=-1), COS_EPS)
    nx = np.maximum(np.linalg.norm(tokens, axis=-1), COS_EPS)
    sim = np.einsum("blc,bc->bl", tokens, cls) / (nx * ncls[:, None])

    p = mask
    q = 1.0 - mask
    # logits[b, i, j] = weight(i, j) * score(j): row i attends over keys j
    a_fg = _softmax((1.0 - sim)[:, None, :] * p[:, :, None] * p[:, None, :])
    a_bg = _softmax(sim[:, None, :] * q[:, :, None] * q[:, None, :])
    x_fg = a_fg @ tokens
    x_bg = a_bg @ tokens
    mixed = p[..., None] * x_fg + q[..., None] * x_bg
    return alpha * mixed + (1.0 - alpha) * tokens


def spa_aggregate(tokens, cls, mask, side, kernel, eps):
    tokens = np.ascontiguousarray(tokens, dtype=np.float64)
    B, L, C = tokens.shape
    half = kernel // 2
    K = kernel * kernel

    grid = tokens.reshape(B, side, side, C)
    grid = np.pad(grid, ((0, 0), (half, half), (half, half), (0, 0)))
    pmask = np.pad(mask.reshape(B, side, side), ((0, 0), (half, half), (half, half)))
    valid = np.pad(np.ones((B, side, side)), ((0, 0), (half, half), (half, half)))

    # (B, side, side, C, k, k) -> (B, L, K, C)
    xw = sliding_window_view(grid, (kernel, kernel), axis=(1, 2))
    xw = xw.reshape(B, side, side, C, K).transpose(0, 1, 2, 4, 3).reshape(B, L, K, C)
    pw = sliding_window_view(pmask, (kernel, kernel), axis=(1, 2)).reshape(B, L, K)
    vw = sliding_window_view(valid, (kernel, kernel), axis=(1, 2)).reshape(B, L, K)
    pbw = (1.0 - pw) * vw

    ncls = np.maximum(np.linalg.norm(cls, axis=-1), COS_EPS)[:, None, None]
    norm = np.linalg.norm(xw, axis=-1)
    dot = np.einsum("blkc,bc->blk", xw, cls)

    cos_bg = pbw * dot / (np.maximum(pbw * norm, COS_EPS) * ncls)
    s_bg = cos_bg * pbw * norm

    n_valid = vw.sum(axis=-1, keepdims=True)
    mu = np.einsum("blk,blkc->blc", pw, xw) / n_valid
    cos_fg = pw * dot / (np.maximum(pw * norm, COS_EPS) * ncls)
    dev = np.linalg.norm(pw[..., None] * xw - mu[:, :, None, :], axis=-1)
    r_fg = (1.0 - cos_fg) * dev

    is_pad = vw == 0
    w_bg = _softmax(np.where(is_pad, -np.inf, s_bg))
    w_fg = _softmax(np.where(is_pad, -np.inf, r_fg))

    sum_p = pw.sum(axis=-1, keepdims=True)
    sum_pb = pbw.sum(axis=-1, keepdims=True)
    weight = w_fg * pw / (sum_p + eps) + w_bg * pbw / (sum_pb + eps)
    return np.einsum("blk,blkc->blc", weight, xw)
