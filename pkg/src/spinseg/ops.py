"""Differentiable operators on (B, C, H, W) tensors.

Convolutions are cross-correlations. Stride 1 accumulates one matrix product
per kernel tap over the flattened, zero-padded NHWC image; larger strides use
im2col. All reductions run through numpy/BLAS in a fixed order, so identical
inputs give bit-identical outputs on a given machine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_result


@dataclass
class ConvParams:
    """Filter bank of a convolution layer; ``weight`` is [out_ch, in_ch, kH, kW]."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias length {self.bias.shape} does not match out_ch={self.weight.shape[0]}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def _check_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected a (B, C, H, W) tensor, got shape {x.shape}")


def _nhwc_padded(a: np.ndarray, pad: int) -> np.ndarray:
    B, C, H, W = a.shape
    out = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=a.dtype)
    out[:, pad : pad + H, pad : pad + W, :] = a.transpose(0, 2, 3, 1)
    return out


def _outer_or_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS handles an (N, 1) @ (1, K) product poorly; broadcasting is faster
    if a.shape[1] == 1:
        return a * b
    return a @ b


def _conv_stride1(xd, w, bias, pad):
    """Implicit GEMM. On the flattened padded NHWC image, kernel tap (i, j) of
    every output pixel sits at a fixed row offset i*Wp + j, so each tap is one
    contiguous (L, C) @ (C, Cout) product. Rows that straddle image edges are
    computed and discarded."""
    B, C, H, W = xd.shape
    Cout, _, kh, kw = w.shape
    xh = _nhwc_padded(xd, pad)
    Hp, Wp = xh.shape[1:3]
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    xf = xh.reshape(-1, C)
    offs = [i * Wp + j for i in range(kh) for j in range(kw)]
    L = B * Hp * Wp - offs[-1]
    taps = [np.ascontiguousarray(w[:, :, i, j].T) for i in range(kh) for j in range(kw)]
    y = np.zeros((B * Hp * Wp, Cout), dtype=xd.dtype)
    yl = y[:L]
    np.matmul(xf[offs[0] : offs[0] + L], taps[0], out=yl)
    for o, t in zip(offs[1:], taps[1:]):
        yl += xf[o : o + L] @ t
    out = y.reshape(B, Hp, Wp, Cout)[:, :Ho, :Wo, :] + bias
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g, need_x, need_w):
        gf = np.zeros((B, Hp, Wp, Cout), dtype=g.dtype)
        gf[:, :Ho, :Wo, :] = g.transpose(0, 2, 3, 1)
        gl = gf.reshape(-1, Cout)[:L]
        gw = gx = None
        if need_w:
            gw = np.empty((kh, kw, Cout, C), dtype=g.dtype)
            for n, o in enumerate(offs):
                gw[n // kw, n % kw] = (xf[o : o + L].T @ gl).T
            gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
        if need_x:
            dxf = np.zeros((B * Hp * Wp, C), dtype=g.dtype)
            for n, o in enumerate(offs):
                dxf[o : o + L] += _outer_or_matmul(gl, np.ascontiguousarray(w[:, :, n // kw, n % kw]))
            dx = dxf.reshape(B, Hp, Wp, C)[:, pad : pad + H, pad : pad + W, :]
            gx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        return gx, gw

    return out, backward


def _conv_strided(xd, w, bias, pad, s):
    """im2col path for stride > 1 (not used by the model, kept general)."""
    B, C, H, W = xd.shape
    Cout, _, kh, kw = w.shape
    xh = _nhwc_padded(xd, pad)
    Hp, Wp = xh.shape[1:3]
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i : i + s * Ho : s, j : j + s * Wo : s, :]
    cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    wmat = w.transpose(0, 2, 3, 1).reshape(Cout, kh * kw * C)
    out = cols @ wmat.T + bias
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward(g, need_x, need_w):
        go = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        gw = gx = None
        if need_w:
            gw = (cols.T @ go).T.reshape(Cout, kh, kw, C).transpose(0, 3, 1, 2).copy()
        if need_x:
            dcols = _outer_or_matmul(go, wmat).reshape(B, Ho, Wo, kh, kw, C)
            dxh = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxh[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(dxh[:, pad : pad + H, pad : pad + W, :].transpose(0, 3, 1, 2))
        return gx, gw

    return out, backward


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with zero padding, plus bias."""
    _check_rank4(x, "conv2d")
    w, b = p.weight, p.bias
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if C != Cin:
        raise ValueError(f"conv2d: input has {C} channels but weight expects in_ch={Cin}")
    s, pad = p.stride, p.padding
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < kh or Wp < kw:
        raise ValueError(f"conv2d: padded extent {(Hp, Wp)} smaller than kernel {(kh, kw)}")
    if (Hp - kh) % s or (Wp - kw) % s:
        raise ValueError(
            f"conv2d: height/width {(H, W)} with padding {pad} not compatible with "
            f"kernel {(kh, kw)} and stride {s}"
        )
    if s == 1:
        out, inner = _conv_stride1(x.data, w.data, b.data, pad)
    else:
        out, inner = _conv_strided(x.data, w.data, b.data, pad, s)

    def bw(g):
        gx, gw = inner(g, x.requires_grad, w.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, w, b), "conv2d", bw)


def transposed_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2x2, stride-2 transposed convolution; each input pixel fills one 2x2 block."""
    _check_rank4(x, "transposed_conv2d")
    if p.stride != 2 or p.kernel_size != (2, 2) or p.padding != 0:
        raise ValueError(
            "transposed_conv2d supports only kernel 2x2, stride 2, padding 0; got "
            f"kernel {p.kernel_size}, stride {p.stride}, padding {p.padding}"
        )
    w, b = p.weight, p.bias
    B, C, H, W = x.shape
    Cout, Cin = w.shape[:2]
    if C != Cin:
        raise ValueError(f"transposed_conv2d: input has {C} channels but weight expects {Cin}")
    rows = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    # [Cin, Cout * 4] with (o, di, dj) flattened row-major
    wmat = w.data.transpose(1, 0, 2, 3).reshape(Cin, Cout * 4)
    out = (rows @ wmat).reshape(B, H, W, Cout, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(B, Cout, 2 * H, 2 * W)
    out = out + b.data[None, :, None, None]

    def bw(g):
        gblk = g.reshape(B, Cout, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, Cout * 4)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gblk @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = (rows.T @ gblk).reshape(Cin, Cout, 2, 2).transpose(1, 0, 2, 3).copy()
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return make_result(out, (x, w, b), "transposed_conv2d", bw)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element
    in row-major window order."""
    _check_rank4(x, "max_pool2d")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d: height and width must be even, got {(H, W)}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(B, C, H, W),)

    return make_result(np.ascontiguousarray(out), (x,), "max_pool2d", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result(y, (x,), "sigmoid", lambda g: (g * y * (1 - y),))


def channel_softmax(x: Tensor) -> Tensor:
    _check_rank4(x, "channel_softmax")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result(s, (x,), "channel_softmax", bw)


def activation(x: Tensor, kind: str) -> Tensor:
    fns = {"relu": relu, "sigmoid": sigmoid, "channel_softmax": channel_softmax}
    if kind not in fns:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(fns)}")
    return fns[kind](x)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank4(a, "concat_channels")
    _check_rank4(b, "concat_channels")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(
            f"concat_channels: batch/spatial mismatch between {a.shape} and {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return make_result(out, (a, b), "concat", lambda g: (g[:, :ca], g[:, ca:]))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank4(x, "channel_slice")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(x.data[:, start:stop].copy(), (x,), "channel_slice", bw)


def pad_to(x: Tensor, height: int, width: int) -> Tensor:
    """Zero-pad bottom/right up to ``(height, width)``."""
    B, C, H, W = x.shape
    if height == H and width == W:
        return x
    out = np.zeros((B, C, height, width), dtype=x.dtype)
    out[:, :, :H, :W] = x.data
    return make_result(out, (x,), "pad", lambda g: (np.ascontiguousarray(g[:, :, :H, :W]),))


def crop_to(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``(height, width)`` window."""
    B, C, H, W = x.shape
    if height == H and width == W:
        return x

    def bw(g):
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, :height, :width] = g
        return (gx,)

    return make_result(x.data[:, :, :height, :width].copy(), (x,), "crop", bw)


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """Interpolation matrix (2n, n) for half-pixel aligned 2x upsampling."""
    a = np.zeros((2 * n, n), dtype=np.float64)
    for u in range(2 * n):
        src = min(max((u + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        a[u, i0] += 1 - t
        a[u, i1] += t
    return a.astype(dtype)


def upsample2x(x: Tensor, mode: str) -> Tensor:
    """Fixed 2x upsampling, ``mode`` in {"bilinear", "nearest"}."""
    _check_rank4(x, "upsample2x")
    B, C, H, W = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def bw(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

        return make_result(out, (x,), "upsample_nearest", bw)
    if mode != "bilinear":
        raise ValueError(f"unknown upsampling mode {mode!r}")
    ah = _bilinear_matrix(H, x.dtype)
    aw = _bilinear_matrix(W, x.dtype)
    out = np.einsum("uh,bchw,vw->bcuv", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("uh,bcuv,vw->bchw", ah, g, aw, optimize=True),)

    return make_result(out, (x,), "upsample_bilinear", bw)


def weighted_block_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Convex combination over channels: sum_k weights[:, k] * values[:, k].

    ``weights`` must be nonnegative and sum to 1 per pixel. The sum is taken
    relative to the per-pixel minimum and clamped to [min, max] of the values,
    so rounding can neither push the result outside the block range nor move a
    block of equal values off that value. The gradient is that of the plain sum.
    """
    if weights.shape != values.shape:
        raise ValueError(f"weighted_block_sum: {weights.shape} vs {values.shape}")
    wd, vd = weights.data, values.data
    lo = vd.min(axis=1, keepdims=True)
    hi = vd.max(axis=1, keepdims=True)
    out = np.clip(lo + (wd * (vd - lo)).sum(axis=1, keepdims=True), lo, hi)

    def bw(g):
        return (g * vd if weights.requires_grad else None, g * wd if values.requires_grad else None)

    return make_result(out, (weights, values), "weighted_block_sum", bw)


def constant_like(x: Tensor, value: float, shape=None) -> Tensor:
    return as_tensor(np.full(shape or x.shape, value, dtype=x.dtype))
