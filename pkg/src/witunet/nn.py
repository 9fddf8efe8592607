"""Differentiable NN primitives: conv, transposed conv, linear, layer-norm,
softmax, GELU. Convolutions are im2col + BLAS matmul; every backward formula
is written out here and checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _as_tensor, _make


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d cross-correlation."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output extent ({oh},{ow}) < 1 for input ({h},{w}) with {self}"
            )
        return oh, ow

    @staticmethod
    def from_weight(weight_shape, stride: int, padding: int) -> "ConvSpec":
        cout, cin, kh, kw = weight_shape
        return ConvSpec(cin, cout, kh, kw, stride, padding)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(N,C,H,W) -> (N, C*kh*kw, OH*OW) patches, plus (OH, OW)."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow), (oh, ow)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the image grid."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x (N,Cin,H,W), weight (Cout,Cin,kh,kw), bias (Cout)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (N,C,H,W), got {x.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel axis: input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias axis: expected ({cout},), got {bias.shape}")
    n = x.shape[0]
    cols, (oh, ow) = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols)  # (N, Cout, OH*OW)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, oh, ow)

    x_needs = x._needs_grad()

    def backward(g):
        g2 = g.reshape(n, cout, oh * ow)
        gt = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(cout, n * oh * ow)
        ct = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cin * kh * kw, n * oh * ow)
        gw = np.matmul(gt, ct.T).reshape(weight.shape)
        gx = None
        if x_needs:
            gcols = np.matmul(w2.T, g2)  # (N, Cin*kh*kw, OH*OW)
            gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Transposed conv (adjoint of conv2d with padding 0).

    x (N,Cin,H,W), weight (Cin,Cout,kh,kw) -> (N, Cout, (H-1)*stride+kh, ...).
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if x.ndim != 4:
        raise ShapeError(f"conv_transpose2d input must be 4-d, got {x.shape}")
    cin, cout, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv_transpose2d channel axis: input has {x.shape[1]} channels, weight expects {cin}"
        )
    n, _, h, w = x.shape
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    w2 = weight.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(n, cin, h * w)
    cols = np.matmul(w2.T, x2)  # (N, Cout*kh*kw, H*W)
    out = _col2im(cols, (n, cout, oh, ow), kh, kw, stride, 0)
    if bias is not None:
        out += bias.data[None, :, None, None]

    x_needs = x._needs_grad()

    def backward(g):
        gcols, _ = _im2col(g, kh, kw, stride, 0)  # (N, Cout*kh*kw, H*W)
        gx = None
        if x_needs:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        xt = np.ascontiguousarray(x2.transpose(1, 0, 2)).reshape(cin, n * h * w)
        gct = np.ascontiguousarray(gcols.transpose(1, 0, 2)).reshape(cout * kh * kw, n * h * w)
        gw = np.matmul(xt, gct.T).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


def depthwise_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel conv. weight (C,1,kh,kw); each channel filtered independently."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    c, one, kh, kw = weight.shape
    if one != 1 or x.shape[1] != c:
        raise ShapeError(f"depthwise weight {weight.shape} incompatible with input {x.shape}")
    n = x.shape[0]
    cols, (oh, ow) = _im2col(x.data, kh, kw, stride, padding)
    cols = cols.reshape(n, c, kh * kw, oh * ow)
    w2 = weight.data.reshape(c, kh * kw)
    out = np.einsum("nckp,ck->ncp", cols, w2, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, c, oh, ow)

    x_needs = x._needs_grad()

    def backward(g):
        g2 = g.reshape(n, c, oh * ow)
        gw = np.einsum("ncp,nckp->ck", g2, cols, optimize=True).reshape(weight.shape)
        gx = None
        if x_needs:
            gcols = np.einsum("ncp,ck->nckp", g2, w2, optimize=True)
            gx = _col2im(gcols.reshape(n, c * kh * kw, oh * ow), x.shape, kh, kw, stride, padding)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


def linear(x, weight, bias=None) -> Tensor:
    """x (...,Din) @ weight(Dout,Din).T + bias; batch shape is preserved."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear trailing dim: input has {x.shape[-1]}, weight expects {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = np.matmul(x2, weight.data.T)
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, dout)

    def backward(g):
        g2 = g.reshape(-1, dout)
        gx = np.matmul(g2, weight.data).reshape(x.shape)
        gw = np.matmul(g2.T, x2)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit (biased) variance,
    then apply the gamma/beta affine."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        lead_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead_axes)
        gbeta = g.sum(axis=lead_axes)
        gh = g * gamma.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gh - m1 - xhat * m2)
        return gx.astype(dt, copy=False), ggamma, gbeta

    return _make(out.astype(dt, copy=False), (x, gamma, beta), backward)


def softmax(x, additive_mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax over the trailing axis.

    ``additive_mask`` is a constant (not differentiated) added to the logits,
    e.g. -1e9 on padded key positions.
    """
    x = _as_tensor(x)
    logits = x.data if additive_mask is None else x.data + additive_mask.astype(x.data.dtype)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = _as_tensor(x)
    dt = x.data.dtype
    c = dt.type(_GELU_C)
    a = dt.type(_GELU_A)
    half = dt.type(0.5)
    x3 = x.data * x.data * x.data
    t = np.tanh(c * (x.data + a * x3))
    out = half * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3.0 * a * x.data * x.data)
        d = half * (1.0 + t) + half * x.data * (1.0 - t * t) * du
        return ((g * d).astype(dt, copy=False),)

    return _make(out, (x,), backward)
