"""Straight-loop reference implementations.

Each function here is written independently of the vectorised/compiled path
it checks: one image at a time, explicit loops, no shared helpers with the
production modules.  Used by the test-suite and ``fbclip selftest``.
"""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-8


def _cos(a, b):
    na = max(math.sqrt(float(np.dot(a, a))), EPS)
    nb = max(math.sqrt(float(np.dot(b, b))), EPS)
    return float(np.dot(a, b)) / (na * nb)


def _softmax(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    z = sum(e)
    return [x / z for x in e]


# -- text pooling --------------------------------------------------------------

def argmax_scan(ids):
    best, pos = None, -1
    for i, v in enumerate(ids):
        if best is None or v > best:
            best, pos = v, i
    return pos


def mean_rows(rows):
    acc = np.zeros(len(rows[0]))
    for r in rows:
        acc = acc + np.asarray(r, dtype=np.float64)
    return acc / len(rows)


def softmax_pool(rows, logits):
    w = _softmax(list(logits))
    acc = np.zeros(len(rows[0]))
    for wi, r in zip(w, rows):
        acc = acc + wi * np.asarray(r, dtype=np.float64)
    return acc, w


# -- mask indicators -----------------------------------------------------------

def local_saliency(x):
    L = len(x)
    out = []
    for i in range(L):
        left = x[max(i - 1, 0)]
        right = x[min(i + 1, L - 1)]
        avg = (left + x[i] + right) / 3.0
        out.append(float(np.linalg.norm(x[i] - avg)))
    return np.array(out)


def center_distance(x, center=None):
    if center is None:
        center = mean_rows(x)
    return np.array([float(np.linalg.norm(row - center)) for row in x])


def cls_inconsistency(x, cls):
    return np.array([1.0 - _cos(row, cls) for row in x])


def temporal_variation(x, prev):
    return np.array([float(np.linalg.norm(a - b)) for a, b in zip(x, prev)])


def minmax(v, eps=EPS):
    lo, hi = min(v), max(v)
    return np.array([(a - lo) / (hi - lo + eps) for a in v])


def soft_mask(x, cls, prev=None, weights=(0.3, 0.3, 0.3, 0.1), threshold=0.5):
    a1, a2, a3, a4 = weights
    if prev is None:
        s = a1 + a2 + a3
        a1, a2, a3, a4 = a1 / s, a2 / s, a3 / s, 0.0
    parts = [a1 * minmax(local_saliency(x)), a2 * minmax(center_distance(x)), a3 * minmax(cls_inconsistency(x, cls))]
    if prev is not None:
        parts.append(a4 * minmax(temporal_variation(x, prev)))
    score = sum(parts)
    return np.array([1.0 if a > threshold else 0.5 for a in score]), score


# -- semantic view: double loop over query and key tokens ---------------------

def semantic_view(tokens, p, alpha=0.6):
    """tokens (L+1, C) with cls first; p (L,).  Returns (L+1, C)."""
    cls = tokens[0]
    x = tokens[1:]
    L = len(x)
    w_fg = [[p[i] * p[j] for j in range(L)] for i in range(L)]
    w_bg = [[(1 - p[i]) * (1 - p[j]) for j in range(L)] for i in range(L)]
    S = [_cos(x[j], cls) for j in range(L)]
    R = [1 - s for s in S]
    out = [cls.copy()]
    for i in range(L):
        a_fg = _softmax([R[j] * w_fg[i][j] for j in range(L)])
        a_bg = _softmax([S[j] * w_bg[i][j] for j in range(L)])
        fg_agg = np.zeros_like(x[0])
        bg_agg = np.zeros_like(x[0])
        for j in range(L):
            fg_agg = fg_agg + a_fg[j] * x[j]
            bg_agg = bg_agg + a_bg[j] * x[j]
        out.append(alpha * (p[i] * fg_agg + (1 - p[i]) * bg_agg) + (1 - alpha) * x[i])
    return np.array(out)


# -- spatial view ---------------------------------------------------------------

def spatial_view(tokens, p, kernel=5, eps=1e-8):
    """Neighbourhood loop over an h x h grid; pads are skipped (contribute to neither stream)."""
    cls = tokens[0]
    x = tokens[1:]
    side = int(round(math.sqrt(len(x))))
    half = kernel // 2
    out = [cls.copy()]
    for r in range(side):
        for c in range(side):
            slots = []
            for dr in range(-half, half + 1):
                for dc in range(-half, half + 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < side and 0 <= cc < side:
                        slots.append(rr * side + cc)
            fg_patches = [p[t] * x[t] for t in slots]
            bg_patches = [(1 - p[t]) * x[t] for t in slots]
            mu = sum(fg_patches) / len(slots)
            s_bg = [_cos(b, cls) * float(np.linalg.norm(b)) for b in bg_patches]
            r_fg = [(1 - _cos(f, cls)) * float(np.linalg.norm(f - mu)) for f in fg_patches]
            w_bg = _softmax(s_bg)
            w_fg = _softmax(r_fg)
            fg_num = sum(w * f for w, f in zip(w_fg, fg_patches))
            bg_num = sum(w * b for w, b in zip(w_bg, bg_patches))
            fg_den = sum(p[t] for t in slots) + eps
            bg_den = sum(1 - p[t] for t in slots) + eps
            out.append(fg_num / fg_den + bg_num / bg_den)
    return np.array(out)


# -- background suppression ----------------------------------------------------

def prototype(bank):
    M, C = len(bank), len(bank[0])
    out = np.zeros(C)
    for c in range(C):
        col = [bank[m][c] for m in range(M)]
        out[c] = 0.5 * (sum(col) / M) + 0.5 * max(col)
    return out


def suppress(patches, proto, alpha=0.5):
    """Returns (suppressed patches, residual norms)."""
    out, errs = [], []
    for f in patches:
        s_bg = _cos(f, proto)
        a = f - proto
        e = float(np.linalg.norm(a))
        a_enh = a * (1 - s_bg)
        out.append(alpha * f + (1 - alpha) * a_enh)
        errs.append(e)
    return np.array(out), np.array(errs)


# -- alignment / regulariser ---------------------------------------------------

def align(v, text, tau=0.07):
    vn = v / (math.sqrt(float(np.dot(v, v))) + EPS)
    s = []
    for t in text:
        tn = t / (math.sqrt(float(np.dot(t, t))) + EPS)
        s.append(float(np.dot(vn, tn)) / tau)
    return np.array(s), np.array(_softmax(s))


# -- metrics ---------------------------------------------------------------------

def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def ap_sweep(scores, labels):
    n_pos = sum(1 for y in labels if y)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def _regions(gt):
    """8-connected components by flood fill."""
    H, W = gt.shape
    seen = np.zeros_like(gt, dtype=bool)
    regions = []
    for i in range(H):
        for j in range(W):
            if gt[i, j] and not seen[i, j]:
                stack, comp = [(i, j)], []
                seen[i, j] = True
                while stack:
                    a, b = stack.pop()
                    comp.append((a, b))
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            u, v = a + da, b + db
                            if 0 <= u < H and 0 <= v < W and gt[u, v] and not seen[u, v]:
                                seen[u, v] = True
                                stack.append((u, v))
                regions.append(comp)
    return regions


def aupro_sweep(maps, gts, fpr_limit=0.3):
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    regions = [(k, comp) for k, g in enumerate(gts) for comp in _regions(g)]
    n_neg = sum(int((~g).sum()) for g in gts)
    points = [(0.0, 0.0)]
    for t in sorted({float(v) for m in maps for v in m.ravel()}, reverse=True):
        fp = sum(int(((m >= t) & ~g).sum()) for m, g in zip(maps, gts))
        overlaps = [sum(1 for (a, b) in comp if maps[k][a, b] >= t) / len(comp) for k, comp in regions]
        points.append((fp / n_neg, sum(overlaps) / len(overlaps)))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (fpr_limit - x0) * (y1 - y0) / (x1 - x0)
            x1 = fpr_limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / fpr_limit


def gaussian_smooth(m, sigma, truncate=4.0):
    """Explicit 2-D convolution, half-sample symmetric boundary."""
    radius = int(truncate * sigma + 0.5)
    k = [math.exp(-0.5 * (i / sigma) ** 2) for i in range(-radius, radius + 1)]
    z = sum(k)
    k = [v / z for v in k]
    H, W = m.shape
    padded = np.pad(m, radius, mode="symmetric")
    out = np.zeros_like(m, dtype=np.float64)
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for a in range(2 * radius + 1):
                for b in range(2 * radius + 1):
                    acc += k[a] * k[b] * padded[i + a, j + b]
            out[i, j] = acc
    return out


# -- gradients --------------------------------------------------------------------

def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at float64 array/tensor ``x``."""
    import torch

    x = x.detach().clone().to(torch.float64)
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    import torch

    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), floor))
