"""Slow loop-based reference implementations used as test oracles.

Each function works on plain nested lists or numpy arrays, one pixel at a
time, and shares no code with the vectorized versions.
"""

from __future__ import annotations

import math

import numpy as np


def depth_stability(pred, mask, depth, eps: float = 1e-7) -> float:
    p, m, d = (np.asarray(a, dtype=np.float64).ravel().tolist() for a in (pred, mask, depth))
    n_fg = sum(m)
    if n_fg == 0:
        return 0.0
    mu = sum(di * mi for di, mi in zip(d, m)) / n_fg
    total = 0.0
    for pi, mi, di in zip(p, m, d):
        py = pi * mi + (1 - pi) * (1 - mi)
        nl = -math.log(min(max(py, eps), 1.0))
        fp = (1 - py) * pi
        fn = (1 - py) * mi
        diff = (di - mu) ** 2
        total += nl * (diff * (fp - fn) + fn)
    return total / len(p)


def sobel_at(depth: np.ndarray, y: int, x: int) -> tuple[float, float]:
    h, w = depth.shape

    def px(yy, xx):
        return depth[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]

    gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) - (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1))
    gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) - (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1))
    return gx, gy


def depth_continuity(pred, mask, depth, eps: float = 1e-7) -> float:
    p, m, d = (np.asarray(a, dtype=np.float64) for a in (pred, mask, depth))
    h, w = d.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            py = p[y, x] * m[y, x] + (1 - p[y, x]) * (1 - m[y, x])
            gx, gy = sobel_at(d, y, x)
            total += -math.log(min(max(py, eps), 1.0)) * (abs(gx) + abs(gy))
    return total / (h * w)


def boundary_weights(mask, radius: int = 15) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            s = c = 0.0
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    s += m[yy, xx]
                    c += 1
            out[y, x] = 1 + 5 * abs(s / c - m[y, x])
    return out


def weighted_bce(logits, mask) -> float:
    z, m = np.asarray(logits, dtype=np.float64), np.asarray(mask, dtype=np.float64)
    w = boundary_weights(m)
    num = den = 0.0
    for zi, mi, wi in zip(z.ravel(), m.ravel(), w.ravel()):
        p = 1 / (1 + math.exp(-zi))
        num += wi * -(mi * math.log(p) + (1 - mi) * math.log(1 - p))
        den += wi
    return num / den


def weighted_iou(pred, mask) -> float:
    p, m = np.asarray(pred, dtype=np.float64), np.asarray(mask, dtype=np.float64)
    w = boundary_weights(m)
    inter = union = 0.0
    for pi, mi, wi in zip(p.ravel(), m.ravel(), w.ravel()):
        inter += wi * pi * mi
        union += wi * (pi + mi - pi * mi)
    return 0.0 if union == 0 else 1 - inter / union


def ssim(pred, mask, size: int = 11, sigma: float = 1.5, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM with a zero-padded Gaussian window evaluated at every pixel."""
    x, y = np.asarray(pred, dtype=np.float64), np.asarray(mask, dtype=np.float64)
    h, w = x.shape
    r = size // 2
    g = [math.exp(-((i - r) ** 2) / (2 * sigma**2)) for i in range(size)]
    gs = sum(g)
    g = [v / gs for v in g]
    total = 0.0
    for cy in range(h):
        for cx in range(w):
            mx = my = sxx = syy = sxy = 0.0
            for dy in range(size):
                for dx in range(size):
                    yy, xx = cy + dy - r, cx + dx - r
                    if 0 <= yy < h and 0 <= xx < w:
                        k = g[dy] * g[dx]
                        a, b = x[yy, xx], y[yy, xx]
                        mx += k * a
                        my += k * b
                        sxx += k * a * a
                        syy += k * b * b
                        sxy += k * a * b
            vx, vy, cv = sxx - mx * mx, syy - my * my, sxy - mx * my
            total += ((2 * mx * my + c1) * (2 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (h * w)


def silog(d_pred, d_target, lam: float = 0.85, eps: float = 1e-6) -> float:
    d = [math.log(max(a, eps)) - math.log(max(b, eps))
         for a, b in zip(np.ravel(d_pred).tolist(), np.ravel(d_target).tolist())]
    n = len(d)
    inner = sum(v * v for v in d) / n - lam * (sum(d) / n) ** 2
    return math.sqrt(inner) if inner > 0 else 0.0


# --------------------------------------------------------------------------- metrics


def mae(pred, mask) -> float:
    p, m = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(mask).ravel()
    return sum(abs(a - (1.0 if b else 0.0)) for a, b in zip(p, m)) / len(p)


def f_beta_binary(binary_pred, mask, beta2: float = 0.3) -> float:
    tp = fp = pos = 0
    for a, b in zip(np.ravel(binary_pred), np.ravel(mask)):
        a, b = bool(a), bool(b)
        tp += a and b
        fp += a and not b
        pos += b
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / pos if pos else 0.0
    den = beta2 * prec + rec
    return (1 + beta2) * prec * rec / den if den else 0.0


def f_max(pred, mask, beta2: float = 0.3) -> float:
    p = np.asarray(pred, dtype=np.float64)
    bins = np.floor(p * 255)
    return max(f_beta_binary(bins >= k, mask, beta2) for k in range(256))


def enhanced_alignment(binary_pred, mask, eps: float = np.spacing(1)) -> float:
    """Per-pixel enhanced-alignment score of a binary prediction."""
    b = np.asarray(binary_pred, dtype=np.float64).ravel()
    g = np.asarray(mask, dtype=np.float64).ravel()
    n = len(g)
    n_fg = g.sum()
    if n_fg == 0:
        total = float(np.sum(1 - b))
    elif n_fg == n:
        total = float(np.sum(b))
    else:
        mb, mg = b.mean(), g.mean()
        total = 0.0
        for bi, gi in zip(b, g):
            a, c = bi - mb, gi - mg
            align = 2 * a * c / (a * a + c * c + eps)
            total += (align + 1) ** 2 / 4
    return total / (n - 1 + eps)


def e_measure(pred, mask) -> float:
    bins = np.floor(np.asarray(pred, dtype=np.float64) * 255)
    return sum(enhanced_alignment(bins >= k, mask) for k in range(256)) / 256


def patch_scores(boundary, g: int) -> np.ndarray:
    b = np.asarray(boundary)
    bs, _, h, w = b.shape
    ph, pw = h // g, w // g
    out = np.zeros((bs, g * g))
    for n in range(bs):
        for i in range(g):
            for j in range(g):
                out[n, i * g + j] = 1.0 if b[n, :, i * ph:(i + 1) * ph, j * pw:(j + 1) * pw].max() > 0 else 0.0
    return out
