"""Minimal float32 tensor engine with reverse-mode autodiff.

Everything is dense, row-major float32. Ops record onto the active
GradTape only when gradients are actually requested, so plain inference
pays no bookkeeping cost. Broadcasting is deliberately restricted: the
only implicit expansions are per-channel scale/shift and the dedicated
``add_map`` op; anything else needs an explicit reshape.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

F32 = np.float32


class Tensor:
    """Dense float32 array with optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=F32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


class GradTape:
    """Ordered record of differentiable ops.

    Replaying the records in reverse propagates gradients from a scalar
    loss to every participating leaf. ``reset`` drops all records; no op
    survives into the next optimization step.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)
        self._produced = set()  # id() of tensors produced on this tape

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc_value, tb):
        _pop_tape(self)
        return False

    def record(self, out, inputs, backward_fn):
        out.is_leaf = False
        out.requires_grad = True
        self._records.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def reset(self):
        self._records.clear()
        self._produced.clear()

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Populate .grad on every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}"
            )
        if id(loss) not in self._produced:
            raise UsageError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            input_grads = backward_fn(g)
            for inp, ig in zip(inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                holders[key] = inp
        for key, t in holders.items():
            if t.is_leaf and t.requires_grad:
                t.grad = np.ascontiguousarray(grads[key], dtype=F32)


_TAPE_STACK = []


def _push_tape(tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape):
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise UsageError("tape stack corrupted: exiting a tape that is not active")
    _TAPE_STACK.pop()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss):
    tape = active_tape()
    if tape is None:
        raise UsageError("backward() called with no active tape")
    tape.backward(loss)


def retain_grad(t):
    """Mark an op output so backward() stores its gradient like a leaf's."""
    t.is_leaf = True
    return t


def _tracking(*tensors):
    tape = active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in tensors):
        return tape
    return None


def _mm(a, b):
    # BLAS dispatches a different kernel for 1-row operands, which breaks
    # bitwise per-sample reproducibility across batch sizes; pad to 2 rows.
    if a.shape[0] == 1:
        return np.matmul(np.concatenate([a, a], axis=0), b)[:1]
    return np.matmul(a, b)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shape {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    tape = _tracking(a, b)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    tape = _tracking(a, b)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    tape = _tracking(a, b)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def mul_scalar(a, s):
    s = F32(s)
    out = Tensor(a.data * s)
    tape = _tracking(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * s,))
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    tape = _tracking(a)
    if tape is not None:
        orig = a.data.shape
        tape.record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def sum_all(a):
    out = Tensor(a.data.sum(dtype=F32).reshape(()))
    tape = _tracking(a)
    if tape is not None:
        shp = a.data.shape
        tape.record(out, (a,), lambda g: (np.full(shp, g.reshape(()), dtype=F32),))
    return out


def add_channel_bias(x, bias):
    """Add a per-channel bias[C] to x[B,C,H,W]."""
    if x.data.ndim != 4 or bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(
            f"add_channel_bias: channel dim {x.shape} vs bias {bias.shape}"
        )
    out = Tensor(x.data + bias.data[None, :, None, None])
    tape = _tracking(x, bias)
    if tape is not None:
        tape.record(out, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))))
    return out


def mul_channel(x, scale):
    """Scale x[B,C,H,W] by a per-channel factor scale[C]."""
    if x.data.ndim != 4 or scale.data.ndim != 1 or scale.shape[0] != x.shape[1]:
        raise ShapeError(f"mul_channel: channel dim {x.shape} vs scale {scale.shape}")
    out = Tensor(x.data * scale.data[None, :, None, None])
    tape = _tracking(x, scale)
    if tape is not None:
        xd, sd = x.data, scale.data

        def bwd(g):
            gx = g * sd[None, :, None, None] if x.requires_grad else None
            gs = (g * xd).sum(axis=(0, 2, 3)) if scale.requires_grad else None
            return (gx, gs)

        tape.record(out, (x, scale), bwd)
    return out


def add_map(x, m):
    """Add the same [C,H,W] map m to every batch element of x[B,C,H,W]."""
    if x.data.ndim != 4 or m.data.shape != x.data.shape[1:]:
        raise ShapeError(f"add_map: map {m.shape} does not match x {x.shape}")
    out = Tensor(x.data + m.data[None])
    tape = _tracking(x, m)
    if tape is not None:
        tape.record(out, (x, m), lambda g: (g, g.sum(axis=0)))
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, F32(0)))
    tape = _tracking(x)
    if tape is not None:
        mask = x.data > 0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# conv / pool / norm / linear


def _im2col(xd, kh, kw, stride, pad):
    b, c, h, w = xd.shape
    hp = (h + 2 * pad - kh) // stride + 1
    wp = (w + 2 * pad - kw) // stride + 1
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd,
        (b, c, hp, wp, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * hp * wp, c * kh * kw
    )
    return cols, hp, wp


def _col2im(cols_grad, xshape, kh, kw, stride, pad, hp, wp):
    b, c, h, w = xshape
    g = cols_grad.reshape(b, hp, wp, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=F32)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * hp : stride, j : j + stride * wp : stride] += g[
                :, :, i, j
            ]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlate x[B,C,H,W] with kernel[O,C,kh,kw]. No bias."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d, got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d, got {kernel.shape}")
    b, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} vs kernel channels {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ShapeError("conv2d: padding must be >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: spatial extent {h}x{w} (pad {padding}) smaller than kernel {kh}x{kw}"
        )
    cols, hp, wp = _im2col(x.data, kh, kw, stride, padding)
    kflat = kernel.data.reshape(o, c * kh * kw)
    outflat = _mm(cols, kflat.T)
    out = Tensor(outflat.reshape(b, hp, wp, o).transpose(0, 3, 1, 2))
    tape = _tracking(x, kernel)
    if tape is not None:
        xshape = x.data.shape

        def bwd(g):
            gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
                b * hp * wp, o
            )
            gk = (
                _mm(gflat.T, cols).reshape(o, c, kh, kw)
                if kernel.requires_grad
                else None
            )
            gx = None
            if x.requires_grad:
                cols_grad = _mm(gflat, kflat)
                gx = _col2im(cols_grad, xshape, kh, kw, stride, padding, hp, wp)
            return (gx, gk)

        tape.record(out, (x, kernel), bwd)
    return out


def maxpool2d(x, size=2):
    """Max pool with a size x size window and matching stride."""
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool2d: extent {h}x{w} not divisible by {size}")
    hp, wp = h // size, w // size
    win = (
        x.data.reshape(b, c, hp, size, wp, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, hp, wp, size * size)
    )
    # argmax picks the first maximum in a row-major scan of the window
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])
    tape = _tracking(x)
    if tape is not None:

        def bwd(g):
            gw = np.zeros((b, c, hp, wp, size * size), dtype=F32)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            gx = (
                gw.reshape(b, c, hp, wp, size, size)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w)
            )
            return (gx,)

        tape.record(out, (x,), bwd)
    return out


def batchnorm2d(x, gamma, beta, running_mean, running_var, mode, eps=1e-5, momentum=0.1):
    """Per-channel normalization of x[B,C,H,W].

    mode "train" normalizes with batch statistics and updates the running
    buffers in place; mode "infer" uses the running buffers. Differentiable
    in both modes.
    """
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta must be [{c}], got {gamma.shape}/{beta.shape}"
        )
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3), dtype=F32)
        var = x.data.var(axis=(0, 2, 3), dtype=F32)
        running_mean *= F32(1 - momentum)
        running_mean += F32(momentum) * mu
        running_var *= F32(1 - momentum)
        running_var += F32(momentum) * var
    elif mode == "infer":
        if np.any(running_var <= 0):
            bad = int(np.argmin(running_var))
            raise NumericalError(
                f"batchnorm2d: non-positive running variance at channel {bad}"
            )
        mu = running_mean
        var = running_var
    else:
        raise UsageError(f"batchnorm2d: unknown mode {mode!r}")
    ivstd = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(F32)
    xhat = (x.data - mu[None, :, None, None]) * ivstd[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])
    tape = _tracking(x, gamma, beta)
    if tape is not None:
        n = b * h * w

        def bwd(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data[None, :, None, None]
                if mode == "train":
                    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
                    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
                    gx = (
                        ivstd[None, :, None, None]
                        / F32(n)
                        * (
                            F32(n) * dxhat
                            - sum_dxhat[None, :, None, None]
                            - xhat * sum_dxhat_xhat[None, :, None, None]
                        )
                    )
                else:
                    gx = dxhat * ivstd[None, :, None, None]
            return (gx, ggamma, gbeta)

        tape.record(out, (x, gamma, beta), bwd)
    return out


def linear(x, weight, bias):
    """x[B,F] @ weight[F,O] + bias[O]."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear: input must be 2-d, got {x.shape}")
    bdim, f = x.shape
    if weight.shape[0] != f:
        raise ShapeError(f"linear: input features {f} vs weight rows {weight.shape[0]}")
    o = weight.shape[1]
    if bias.shape != (o,):
        raise ShapeError(f"linear: bias must be [{o}], got {bias.shape}")
    out = Tensor(_mm(x.data, weight.data) + bias.data[None, :])
    tape = _tracking(x, weight, bias)
    if tape is not None:

        def bwd(g):
            gx = _mm(g, weight.data.T) if x.requires_grad else None
            gw = _mm(x.data.T, g) if weight.requires_grad else None
            gb = g.sum(axis=0) if bias.requires_grad else None
            return (gx, gw, gb)

        tape.record(out, (x, weight, bias), bwd)
    return out


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels, classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise ShapeError(f"label {int(bad)} out of range [0, {classes})")
    return labels.astype(np.int64)


def log_softmax(logits_data):
    z = logits_data - logits_data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True, dtype=F32))
    return z - lse


def softmax(logits_data):
    """Softmax over axis 1 of a plain [B,K] array."""
    z = logits_data - logits_data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True, dtype=F32)


def softmax_crossentropy(logits, labels):
    """Mean cross-entropy of logits[B,K] against integer labels."""
    b, k = logits.shape
    labels = _check_labels(labels, k)
    logp = log_softmax(logits.data)
    loss = Tensor(np.asarray(-logp[np.arange(b), labels].mean(dtype=F32)))
    tape = _tracking(logits)
    if tape is not None:

        def bwd(g):
            p = softmax(logits.data)
            p[np.arange(b), labels] -= F32(1)
            return (p * (g.reshape(()) / F32(b)),)

        tape.record(loss, (logits,), bwd)
    return loss


def softmax_crossentropy_soft(logits, target_probs):
    """Mean cross-entropy of logits[B,K] against a probability matrix."""
    b, k = logits.shape
    if target_probs.shape != (b, k):
        raise ShapeError(
            f"soft targets {target_probs.shape} do not match logits {logits.shape}"
        )
    t = np.ascontiguousarray(target_probs, dtype=F32)
    logp = log_softmax(logits.data)
    loss = Tensor(np.asarray(-(t * logp).sum(axis=1).mean(dtype=F32)))
    tape = _tracking(logits)
    if tape is not None:

        def bwd(g):
            p = softmax(logits.data)
            return ((p - t) * (g.reshape(()) / F32(b)),)

        tape.record(loss, (logits,), bwd)
    return loss
