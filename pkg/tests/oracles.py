"""Brute-force reference implementations used to verify the fast paths.

Everything here is plain python loops or direct formula evaluation and must
stay independent of the library code it checks.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, kernel, bias, stride=1, pad=0):
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = bias[o]
                for c in range(c_in):
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += kernel[o, c, dy, dx] * xp[c, i * stride + dy, j * stride + dx]
                out[o, i, j] = acc
    return out


def conv4d_loops(x, kernel, bias):
    c_in, ha, wa, hb, wb = x.shape
    c_out = kernel.shape[0]
    xp = np.pad(x, ((0, 0),) + ((1, 1),) * 4)
    out = np.zeros((c_out, ha, wa, hb, wb))
    for o in range(c_out):
        for a in range(ha):
            for b in range(wa):
                for c in range(hb):
                    for d in range(wb):
                        acc = bias[o]
                        for ci in range(c_in):
                            for da in range(3):
                                for db in range(3):
                                    for dc in range(3):
                                        for dd in range(3):
                                            acc += (
                                                kernel[o, ci, da, db, dc, dd]
                                                * xp[ci, a + da, b + db, c + dc, d + dd]
                                            )
                        out[o, a, b, c, d] = acc
    return out


def softmax_direct(x, axes):
    axes = tuple(sorted(axes))
    m = x.max(axis=axes, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axes, keepdims=True)


def max_scan_axis1(x):
    """Max and argmax along axis 1 of a 2-d array by explicit scan."""
    n, m = x.shape
    vals = np.empty(n)
    args = np.empty(n, dtype=int)
    for i in range(n):
        best, bj = -math.inf, 0
        for j in range(m):
            if x[i, j] > best:
                best, bj = x[i, j], j
        vals[i], args[i] = best, bj
    return vals, args


def correlation_loops(fa, fb):
    """Dense dot products between every cell of two (C, H, W) maps."""
    c, ha, wa = fa.shape
    _, hb, wb = fb.shape
    out = np.zeros((ha, wa, hb, wb))
    for i in range(ha):
        for j in range(wa):
            for k in range(hb):
                for l in range(wb):
                    out[i, j, k, l] = float(np.dot(fa[:, i, j], fb[:, k, l]))
    return out


def epipolar_distance_line(F, pa, pb):
    """Point-to-epipolar-line distance via an explicitly normalized line."""
    line = F @ np.array([pa[0], pa[1], 1.0])
    n = math.hypot(line[0], line[1])
    if n == 0.0:
        return math.inf
    unit = line / n
    return abs(unit[0] * pb[0] + unit[1] * pb[1] + unit[2])


def sampson_formula(F, pa, pb):
    xa = np.array([pa[0], pa[1], 1.0])
    xb = np.array([pb[0], pb[1], 1.0])
    e = float(xb @ F @ xa)
    fx = F @ xa
    ftx = F.T @ xb
    denom = fx[0] ** 2 + fx[1] ** 2 + ftx[0] ** 2 + ftx[1] ** 2
    if denom == 0.0:
        return math.inf
    return abs(e) / math.sqrt(denom)


def cell_center(i, j, stride):
    """(x, y) pixel center of feature cell (row i, col j)."""
    return ((j + 0.5) * stride, (i + 0.5) * stride)


def label_cells_loops(s, F, lam, stride_a, stride_b):
    """Per-cell epipolar-consistency classification by exhaustive scan."""
    ha, wa, hb, wb = s.shape
    positive = np.zeros((ha, wa), dtype=bool)
    for i in range(ha):
        for j in range(wa):
            best, bk, bl = -math.inf, 0, 0
            for k in range(hb):
                for l in range(wb):
                    if s[i, j, k, l] > best:
                        best, bk, bl = s[i, j, k, l], k, l
            pa = cell_center(i, j, stride_a)
            pb = cell_center(bk, bl, stride_b)
            d = epipolar_distance_line(F, pa, pb)
            positive[i, j] = d < lam
    return positive


def loss_image_formula(s, y):
    """Both-direction image-level loss evaluated directly from raw scores."""
    pab = softmax_direct(s, (2, 3))
    pba = softmax_direct(s, (0, 1))
    return -y * (pab.max(axis=(2, 3)).sum() + pba.max(axis=(0, 1)).sum())


def _epipolar_direction(prob_max, positive):
    negative = ~positive
    n_pos = int(positive.sum())
    n_neg = int(negative.sum())
    total = 0.0
    if n_neg:
        total += prob_max[negative].sum() / (2.0 * n_neg)
    if n_pos:
        total -= prob_max[positive].sum() / n_pos
    return total


def loss_epipolar_formula(s, F, lam, stride_a, stride_b):
    """Both-direction epipolar loss; pass F=None for a negative pair."""
    pab = softmax_direct(s, (2, 3))
    pba = softmax_direct(s, (0, 1))
    max_ab = pab.max(axis=(2, 3))
    max_ba = pba.max(axis=(0, 1))
    if F is None:
        return max_ab.mean() / 2.0 + max_ba.mean() / 2.0
    pos_ab = label_cells_loops(s, F, lam, stride_a, stride_b)
    pos_ba = label_cells_loops(np.transpose(s, (2, 3, 0, 1)), F.T, lam, stride_b, stride_a)
    return _epipolar_direction(max_ab, pos_ab) + _epipolar_direction(max_ba, pos_ba)


def loss_points_formula(s, gt_mask):
    """Both-direction point loss from a 4-d ground-truth cell mask."""
    pab = softmax_direct(s, (2, 3))
    pba = softmax_direct(s, (0, 1))
    ha, wa, hb, wb = s.shape
    total = 0.0
    for i in range(ha):
        for j in range(wa):
            cells = [(k, l) for k in range(hb) for l in range(wb) if gt_mask[i, j, k, l]]
            if cells:
                total -= max(pab[i, j, k, l] for k, l in cells)
    for k in range(hb):
        for l in range(wb):
            cells = [(i, j) for i in range(ha) for j in range(wa) if gt_mask[i, j, k, l]]
            if cells:
                total -= max(pba[i, j, k, l] for i, j in cells)
    return total


def adam_reference(x0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam iteration on a scalar parameter, for cross-checking."""
    x = float(x0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
    return x
