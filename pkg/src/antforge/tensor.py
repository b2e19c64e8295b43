"""Dense tensors with tape-based reverse-mode differentiation.

Supports exactly the operator set needed for small convolutional classifiers
and the noise-training losses: conv2d, linear, relu, maxpool2x2, flatten,
add, mul, scale, clip01, sum, softmax cross-entropy.

Training runs in float32; the same graphs can be built in float64 for
gradient verification. The tape is rebuilt on every forward pass and
consumed by a single backward() call.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InputError, StateError

__all__ = [
    "Tensor", "add", "mul", "scale", "relu", "clip01", "flatten",
    "linear", "conv2d", "maxpool2x2", "softmax_cross_entropy", "tsum",
    "backward",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _node(data, parents, backward_fn):
    """Internal: result tensor wired into the tape if any parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def bw(g, out):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def bw(g, out):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * a.data.dtype.type(s)

    def bw(g, out):
        if a.requires_grad:
            a._accumulate(g * a.data.dtype.type(s))

    return _node(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bw(g, out):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _node(out_data, (a,), bw)


def clip01(a: Tensor) -> Tensor:
    out_data = np.clip(a.data, 0.0, 1.0)

    def bw(g, out):
        if a.requires_grad:
            # subgradient 0 at both boundaries
            inside = (a.data > 0.0) & (a.data < 1.0)
            a._accumulate(g * inside)

    return _node(out_data, (a,), bw)


def flatten(a: Tensor) -> Tensor:
    batch = a.data.shape[0]
    out_data = a.data.reshape(batch, -1)

    def bw(g, out):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _node(out_data, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bw(g, out):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _node(out_data, (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: [B, n], w: [m, n], b: [m] -> [B, m]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ConfigError(f"linear: shapes {x.data.shape} @ {w.data.shape}ᵀ do not compose")
    if b.data.shape != (w.data.shape[0],):
        raise ConfigError(f"linear: bias shape {b.data.shape} != ({w.data.shape[0]},)")
    out_data = x.data @ w.data.T + b.data

    def bw(g, out):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _node(out_data, (x, w, b), bw)


def _im2col(xp, k, stride):
    """xp: padded input [B, C, Hp, Wp] -> cols [B, Ho, Wo, C*k*k]."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]           # [B, C, Ho, Wo, k, k]
    win = win.transpose(0, 2, 3, 1, 4, 5)               # [B, Ho, Wo, C, k, k]
    b, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b, ho, wo, -1)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding. x: [B,Cin,H,W], w: [Cout,Cin,k,k]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigError("conv2d: expected 4-d input and weight")
    B, Cin, H, W = x.data.shape
    Cout, Cin_w, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if Cin != Cin_w:
        raise ConfigError(f"conv2d: input channels {Cin} != weight channels {Cin_w}")
    if b.data.shape != (Cout,):
        raise ConfigError(f"conv2d: bias shape {b.data.shape} != ({Cout},)")
    if stride < 1 or pad < 0:
        raise ConfigError("conv2d: stride must be >= 1 and pad >= 0")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ConfigError("conv2d: output would be empty")
    if k == 1 and stride == 1 and pad == 0:
        return _conv1x1(x, w, b)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride)                       # [B, Ho, Wo, Cin*k*k]
    wf = w.data.reshape(Cout, -1)
    out_data = cols @ wf.T + b.data                     # [B, Ho, Wo, Cout]
    out_data = out_data.transpose(0, 3, 1, 2)

    def bw(g, out):
        gc = g.transpose(0, 2, 3, 1)                    # [B, Ho, Wo, Cout]
        if b.requires_grad:
            b._accumulate(gc.sum(axis=(0, 1, 2)))
        if w.requires_grad:
            gw = np.tensordot(gc, cols, axes=([0, 1, 2], [0, 1, 2]))
            w._accumulate(gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = gc @ wf                             # [B, Ho, Wo, Cin*k*k]
            gcols = gcols.reshape(B, Ho, Wo, Cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            x._accumulate(gx)

    return _node(out_data, (x, w, b), bw)


def _conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise conv via broadcast elementwise ops, so every spatial position
    runs the bit-identical instruction sequence (exact permutation
    equivariance of pixelwise networks)."""
    B, Cin, H, W = x.data.shape
    Cout = w.data.shape[0]
    ws = w.data[:, :, 0, 0]                             # [Cout, Cin]
    out_data = np.broadcast_to(b.data[None, :, None, None],
                               (B, Cout, H, W)).astype(x.data.dtype).copy()
    for ci in range(Cin):
        out_data += ws[None, :, ci, None, None] * x.data[:, ci][:, None, :, :]

    def bw(g, out):
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
            w._accumulate(gw.reshape(w.data.shape))
        if x.requires_grad:
            gx = np.tensordot(g, ws, axes=([1], [0])).transpose(0, 3, 1, 2)
            x._accumulate(np.ascontiguousarray(gx))

    return _node(out_data, (x, w, b), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ConfigError(f"maxpool2x2: spatial dims must be even, got {H}x{W}")
    Hh, Wh = H // 2, W // 2
    xr = x.data.reshape(B, C, Hh, 2, Wh, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Hh, Wh, 4)
    idx = xr.argmax(axis=-1)
    out_data = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bw(g, out):
        if x.requires_grad:
            gxr = np.zeros((B, C, Hh, Wh, 4), dtype=g.dtype)
            np.put_along_axis(gxr, idx[..., None], g[..., None], axis=-1)
            gx = gxr.reshape(B, C, Hh, Wh, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
            x._accumulate(gx)

    return _node(out_data, (x,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized."""
    labels = np.asarray(labels)
    z = logits.data
    B, K = z.shape
    if labels.shape != (B,):
        raise InputError(f"labels shape {labels.shape} != ({B},)")
    if labels.min() < 0 or labels.max() >= K:
        raise InputError(f"label out of range [0, {K})")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    logZ = np.log(ez.sum(axis=1)) + zmax[:, 0]
    losses = logZ - z[np.arange(B), labels]
    out_data = np.asarray(losses.mean(), dtype=z.dtype)

    def bw(g, out):
        if logits.requires_grad:
            p = ez / ez.sum(axis=1, keepdims=True)
            p[np.arange(B), labels] -= 1.0
            logits._accumulate((g / B) * p.astype(z.dtype))

    return _node(out_data, (logits,), bw)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss into leaf .grad buffers.

    Consumes the tape: a second call on the same graph raises StateError.
    """
    if loss.data.ndim != 0:
        raise InputError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._consumed:
        raise StateError("backward already called on this graph; re-run the forward pass")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any requires_grad tensor")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)
        node._consumed = True
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None
