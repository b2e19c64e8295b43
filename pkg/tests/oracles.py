"""Independent oracles shared across tests: central finite differences,
nested-loop cross-correlation, and bisection-based sphere projection."""

import numpy as np


def finite_diff_grads(f, arrays, h=1e-3):
    """Central-difference gradient of scalar f(list-of-arrays) w.r.t. each array."""
    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def conv2d_loops(x, w, b, stride=1, pad=0):
    """Direct nested-loop cross-correlation with zero padding."""
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo), dtype=np.float64)
    for bi in range(B):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for ci in range(Cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, ci, i * stride + di, j * stride + dj] * \
                                    w[co, ci, di, dj]
                    out[bi, co, i, j] = acc + b[co]
    return out


def bisect_gamma(x, d, eps, iters=200):
    """Bisection oracle for the clipped-sphere scaling factor gamma."""
    xf = x.reshape(-1).astype(np.float64)
    df = d.reshape(-1).astype(np.float64)

    def achieved(gamma):
        delta = np.clip(gamma * df, -xf, 1.0 - xf)
        return np.linalg.norm(delta)

    lo, hi = 0.0, 1.0
    while achieved(hi) < eps:
        hi *= 2.0
        if hi > 1e18:
            return None  # saturates below eps
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if achieved(mid) < eps:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
