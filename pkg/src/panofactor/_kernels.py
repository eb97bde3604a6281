"""Compiled inner loops for warping and pairwise losses."""
import numpy as np
from numba import njit


@njit(cache=True)
def sample_bilinear(img, flow, with_grad):
    h, w, c = img.shape
    out = np.empty_like(img)
    if with_grad:
        ddx = np.empty_like(img)
        ddy = np.empty_like(img)
    else:
        ddx = np.empty((0, 0, 0))
        ddy = np.empty((0, 0, 0))
    ymax = max(h - 2, 0)
    for y in range(h):
        for x in range(w):
            sx = x + flow[y, x, 0]
            sy = y + flow[y, x, 1]
            inside = sy > 0.0 and sy < h - 1.0
            if sy < 0.0:
                sy = 0.0
            elif sy > h - 1.0:
                sy = h - 1.0
            x0f = np.floor(sx)
            fx = sx - x0f
            x0 = int(x0f) % w
            x1 = (x0 + 1) % w
            y0 = min(int(np.floor(sy)), ymax)
            fy = sy - y0
            y1 = min(y0 + 1, h - 1)
            for k in range(c):
                a = img[y0, x0, k]
                b = img[y0, x1, k]
                cc = img[y1, x0, k]
                d = img[y1, x1, k]
                top = a + fx * (b - a)
                bot = cc + fx * (d - cc)
                out[y, x, k] = top + fy * (bot - top)
                if with_grad:
                    ddx[y, x, k] = (1.0 - fy) * (b - a) + fy * (d - cc)
                    ddy[y, x, k] = (bot - top) if inside else 0.0
    return out, ddx, ddy


@njit(cache=True)
def flow_gradient(upstream, ddx, ddy):
    h, w, c = upstream.shape
    g = np.zeros((h, w, 2))
    for y in range(h):
        for x in range(w):
            gx = 0.0
            gy = 0.0
            for k in range(c):
                gx += upstream[y, x, k] * ddx[y, x, k]
                gy += upstream[y, x, k] * ddy[y, x, k]
            g[y, x, 0] = gx
            g[y, x, 1] = gy
    return g


@njit(cache=True, fastmath=True)
def pairwise_abs(a, smooth, with_grad):
    """Sum over i<j of |a_i - a_j| (or its Charbonnier surrogate) per column."""
    n, p = a.shape
    grad = np.zeros((n, p)) if with_grad else np.zeros((0, 0))
    total = 0.0
    s2 = smooth * smooth
    for i in range(n - 1):
        for j in range(i + 1, n):
            acc = 0.0
            if smooth > 0.0:
                for q in range(p):
                    d = a[i, q] - a[j, q]
                    r = np.sqrt(d * d + s2)
                    acc += r
                    if with_grad:
                        g = d / r
                        grad[i, q] += g
                        grad[j, q] -= g
                acc -= p * smooth
            else:
                for q in range(p):
                    d = a[i, q] - a[j, q]
                    acc += abs(d)
                    if with_grad:
                        g = np.sign(d)
                        grad[i, q] += g
                        grad[j, q] -= g
            total += acc
    return total, grad


@njit(cache=True, fastmath=True)
def bicolor_terms(logs, R, s, c1, c2, M, has_color, w_recon, w_rc, w_wl, eps):
    """Data terms of the bi-color objective and their gradients.

    Returns ``(f, dR, ds, dc1, dc2, dM)``; the spatial smoothness prior on
    ``s`` is added by the caller.
    """
    n, h, w, nc = logs.shape
    P = h * w
    pairs = n * (n - 1) // 2
    n_recon = w_recon / (n * P * nc)
    n_rc = w_rc / (max(pairs, 1) * P * nc)
    n_wl = w_wl / (P * nc)
    e2 = eps * eps
    dR = np.zeros((h, w, nc))
    ds = np.zeros((n, h, w))
    dc1 = np.zeros((n, nc))
    dc2 = np.zeros((n, nc))
    dM = np.zeros((n, h, w))
    refl = np.empty(n)
    drefl = np.empty(n)
    B = np.empty(n)
    f_recon = 0.0
    f_rc = 0.0
    f_wl = 0.0
    for y in range(h):
        for x in range(w):
            for c in range(nc):
                sumB = 0.0
                for i in range(n):
                    b = 0.0
                    if has_color:
                        m = M[i, y, x]
                        b = c2[i, c] + m * (c1[i, c] - c2[i, c])
                    B[i] = b
                    sumB += b
                    refl[i] = logs[i, y, x, c] - s[i, y, x] - b
                    r = refl[i] - R[y, x, c]
                    q = np.sqrt(r * r + e2)
                    f_recon += q - eps
                    g = n_recon * r / q
                    dR[y, x, c] -= g
                    drefl[i] = g
                if w_rc > 0.0:
                    for i in range(n - 1):
                        for j in range(i + 1, n):
                            d = refl[i] - refl[j]
                            q = np.sqrt(d * d + e2)
                            f_rc += q - eps
                            g = n_rc * d / q
                            drefl[i] += g
                            drefl[j] -= g
                gw = 0.0
                if has_color and w_wl > 0.0:
                    q = np.sqrt(sumB * sumB + e2)
                    f_wl += q - eps
                    gw = n_wl * sumB / q
                for i in range(n):
                    dS = -drefl[i]
                    ds[i, y, x] += dS
                    if has_color:
                        dB = dS + gw
                        m = M[i, y, x]
                        dc1[i, c] += dB * m
                        dc2[i, c] += dB * (1.0 - m)
                        dM[i, y, x] += dB * (c1[i, c] - c2[i, c])
    f = f_recon * n_recon + f_rc * n_rc + f_wl * n_wl
    return f, dR, ds, dc1, dc2, dM
