"""Independent reference implementations used as test oracles.

Everything here is written for clarity over speed: explicit loops, float64
arithmetic, no shared code with the package under test.
"""

import numpy as np


def conv2d_naive(x, k, stride=1, padding=0):
    """Six-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp = (h + 2 * padding - kh) // stride + 1
    wp = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, o, hp, wp))
    for bi in range(b):
        for oi in range(o):
            for yi in range(hp):
                for xi in range(wp):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += (
                                    xp[bi, ci, yi * stride + di, xi * stride + dj]
                                    * k[oi, ci, di, dj]
                                )
                    out[bi, oi, yi, xi] = acc
    return out


def bn_train_naive(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    xhat = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + eps)
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def bn_infer_naive(x, gamma, beta, rmean, rvar, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    xhat = (x - rmean[None, :, None, None]) / np.sqrt(rvar[None, :, None, None] + eps)
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def relu_naive(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def maxpool_naive(x, size=2):
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    out = np.zeros((b, c, h // size, w // size))
    for bi in range(b):
        for ci in range(c):
            for yi in range(h // size):
                for xi in range(w // size):
                    out[bi, ci, yi, xi] = x[
                        bi, ci, yi * size : (yi + 1) * size, xi * size : (xi + 1) * size
                    ].max()
    return out


def linear_naive(x, w, b):
    return np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64) + b


def crossentropy_naive(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def central_difference(f, x, step=1e-3):
    """Per-element central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def gradient_mismatch(analytic, fd):
    """Worst per-element relative error, floored at 10% of the gradient RMS.

    The floor keeps near-zero entries from demanding absolute agreement
    tighter than float32 arithmetic can deliver.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = np.sqrt((fd**2).mean()) if fd.size else 0.0
    denom = np.maximum(np.abs(fd), 0.1 * scale + 1e-8)
    return float((np.abs(analytic - fd) / denom).max())


def psnr_naive(a, b):
    mse = float(((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim_naive(a, b, window=7, c1=0.01**2, c2=0.03**2):
    """Direct sliding-window SSIM on a single-channel [H,W] image pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h, w = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append(
                ((2 * ma * mb + c1) * (2 * cov + c2))
                / ((ma**2 + mb**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))
