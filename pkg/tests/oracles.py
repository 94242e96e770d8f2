"""Independent brute-force oracles the fast paths are checked against."""

import numpy as np


def naive_dense(x, w, b):
    n, m = x.shape
    units = w.shape[1]
    out = np.zeros((n, units))
    for i in range(n):
        for j in range(units):
            acc = 0.0
            for k in range(m):
                acc += x[i, k] * w[k, j]
            out[i, j] = acc + b[j]
    return out


def naive_conv2d(x, w, b, stride, padding):
    """Direct 6-nested-loop cross-correlation, channel-last."""
    n, h, wid, k = x.shape
    ki, kj, k2, f = w.shape
    assert k == k2
    sh, sw = stride
    if padding == "same":
        u = -(-h // sh)
        v = -(-wid // sw)
        pad_h = max(0, (u - 1) * sh + ki - h)
        pad_w = max(0, (v - 1) * sw + kj - wid)
        top, left = pad_h // 2, pad_w // 2
        xp = np.zeros((n, h + pad_h, wid + pad_w, k))
        xp[:, top:top + h, left:left + wid, :] = x
    else:
        u = (h - ki) // sh + 1
        v = (wid - kj) // sw + 1
        xp = x
    out = np.zeros((n, u, v, f))
    for s in range(n):
        for uu in range(u):
            for vv in range(v):
                for ff in range(f):
                    acc = 0.0
                    for i in range(ki):
                        for j in range(kj):
                            for c in range(k):
                                acc += xp[s, uu * sh + i, vv * sw + j, c] * w[i, j, c, ff]
                    out[s, uu, vv, ff] = acc + b[ff]
    return out


def naive_pool2d(x, window, stride, mode):
    n, h, w, c = x.shape
    kh, kw = window
    sh, sw = stride
    u = (h - kh) // sh + 1
    v = (w - kw) // sw + 1
    out = np.zeros((n, u, v, c))
    for s in range(n):
        for uu in range(u):
            for vv in range(v):
                for cc in range(c):
                    win = x[s, uu * sh:uu * sh + kh, vv * sw:vv * sw + kw, cc]
                    out[s, uu, vv, cc] = win.max() if mode == "max" else win.mean()
    return out


def naive_poly(x, coeffs):
    out = np.zeros_like(x)
    for k, c in enumerate(coeffs):
        out += c * x ** k
    return out


def finite_difference_grads(f, arrays, eps=1e-5):
    """Central-difference gradient of scalar f() w.r.t. each array in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = f()
            flat[i] = old - eps
            lo = f()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom
