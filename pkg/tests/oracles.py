"""Reference implementations written with plain loops; they share no code with camloss."""
import math

import numpy as np


def conv2d_loops(x, w, b, stride, pad):
    p0, p1 = (pad, pad) if isinstance(pad, int) else pad
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    hp, wp = h + p0 + p1, wd + p0 + p1
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[ki])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy = oy * stride + i - p0
                                xx = ox * stride + j - p0
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += float(x[ni, ci, yy, xx]) * float(w[ki, ci, i, j])
                    out[ni, ki, oy, ox] = acc
    return out


def minmax_loops(m):
    flat = [float(v) for v in np.asarray(m).ravel()]
    lo, hi = min(flat), max(flat)
    if hi == lo:
        return np.zeros_like(np.asarray(m, dtype=float))
    return np.array([(v - lo) / (hi - lo) for v in flat]).reshape(np.shape(m))


def cam_loops(f, w):
    k, h, wd = f.shape
    return np.array([[sum(w[c] * f[c, y, x] for c in range(k)) for x in range(wd)] for y in range(h)])


def l1_mean_loops(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    return sum(abs(float(p) - float(q)) for p, q in zip(a, b)) / len(a)


def softmax_loops(z, tau):
    zs = [float(v) / tau for v in z]
    top = max(zs)
    e = [math.exp(v - top) for v in zs]
    s = sum(e)
    return [v / s for v in e]


def kd_loops(student, teacher, tau):
    """Batch mean of (1/n) * sum_i tau^2 (p_t log p_t - p_t log p_s), term by term."""
    total = 0.0
    for zs, zt in zip(student, teacher):
        ps, pt = softmax_loops(zs, tau), softmax_loops(zt, tau)
        n = len(zs)
        acc = 0.0
        for i in range(n):
            acc += tau**2 * (pt[i] * math.log(pt[i]) - pt[i] * math.log(ps[i]))
        total += acc / n
    return total / len(student)


def cross_entropy_loops(logits, target):
    top = max(logits)
    lse = top + math.log(sum(math.exp(v - top) for v in logits))
    return lse - logits[target]


def iou_sets(pred_pixels, mask_pixels):
    pred, mask = set(pred_pixels), set(mask_pixels)
    if not pred and not mask:
        return 1.0
    return len(pred & mask) / len(pred | mask)
