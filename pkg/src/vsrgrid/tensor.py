"""Dense-array layer primitives with explicit forward and backward passes.

Arrays are plain numpy ndarrays in N x C x H x W order (clips stack a
leading T axis). There is no autodiff graph: every layer exposes its own
backward, and the model module chains them. Convolutions are stride-1 with
zero same-padding and odd kernels, which is all the toy model needs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes inconsistent with the operation."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def assert_finite(x: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{context} contains NaN or Inf")
    return x


# cap on im2col scratch per GEMM call (elements); batches are chunked so a
# conv on large frames never materializes hundreds of MB at once
_CHUNK_ELEMS = 1 << 24


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, H*W) patch matrix for same-padded stride-1
    convolution; patch entries ordered (c, u, v)."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n,c,h,w,kh,kw
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, h * w)


def _conv_chunk(n: int, patch: int, hw: int) -> int:
    return max(1, _CHUNK_ELEMS // max(1, patch * hw))


def _conv_shift_add(x: np.ndarray, weight: np.ndarray,
                    bias: np.ndarray | None) -> np.ndarray:
    """Accumulate k-channel output from 1x1 products of shifted views.

    Works in (n, h, w, k) accumulation layout: the tall-and-skinny GEMM
    (h*w, c) @ (c, k) streams the input once per tap at full bandwidth,
    which wins over im2col when k is well below c on memory-bound hosts."""
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    x_t = x.reshape(n, c, h * w).transpose(0, 2, 1)  # (n, hw, c) view
    acc = np.zeros((n, h, w, k), dtype=x.dtype)
    prod = np.empty((n, h * w, k), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            np.matmul(x_t, np.ascontiguousarray(weight[:, :, u, v].T), out=prod)
            p4 = prod.reshape(n, h, w, k)
            du, dv = u - ph, v - pw
            dst = acc[:, max(0, -du):h - max(0, du), max(0, -dv):w - max(0, dv), :]
            src = p4[:, max(0, du):h - max(0, -du), max(0, dv):w - max(0, -dv), :]
            dst += src
    if bias is not None:
        acc += bias
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def conv2d_forward(x: np.ndarray, weight: np.ndarray,
                   bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlate (N,C,H,W) with (K,C,kh,kw), zero same-padding,
    stride 1; spatial size is preserved."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}/{weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernels must be odd-sized, got {kh}x{kw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d bias must be ({k},), got {bias.shape}")
    if 17 * k < 9 * c:
        return _conv_shift_add(x, weight, bias)
    w2 = np.ascontiguousarray(weight.reshape(k, c * kh * kw))
    out = np.empty((n, k, h, w), dtype=x.dtype)
    step = _conv_chunk(n, c * kh * kw, h * w)
    for i in range(0, n, step):
        cols = _im2col(x[i:i + step], kh, kw)
        y = out[i:i + step].reshape(-1, k, h * w)
        np.matmul(w2, cols, out=y)
        if bias is not None:
            y += bias[:, None]
    return out


def _grad_weight_from_input_patches(x: np.ndarray, grad_out: np.ndarray,
                                    kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    k = grad_out.shape[1]
    g3 = grad_out.reshape(n, k, h * w)
    acc = np.zeros((k, c * kh * kw), dtype=x.dtype)
    step = _conv_chunk(n, c * kh * kw, h * w)
    for i in range(0, n, step):
        cols = _im2col(x[i:i + step], kh, kw)
        acc += np.matmul(g3[i:i + step], cols.transpose(0, 2, 1)).sum(axis=0)
    return acc.reshape(k, c, kh, kw)


def _grad_weight_from_output_patches(x: np.ndarray, grad_out: np.ndarray,
                                     kh: int, kw: int) -> np.ndarray:
    """Same contraction built from grad_out patches instead of input
    patches; materializes 9k values per pixel rather than 9c, which wins
    when the layer has fewer output channels than input channels."""
    n, c, h, w = x.shape
    k = grad_out.shape[1]
    xf = x.reshape(n, c, h * w)
    acc = np.zeros((k * kh * kw, c), dtype=x.dtype)
    step = _conv_chunk(n, k * kh * kw, h * w)
    for i in range(0, n, step):
        gcols = _im2col(grad_out[i:i + step], kh, kw)
        acc += np.matmul(gcols, xf[i:i + step].transpose(0, 2, 1)).sum(axis=0)
    # patch offsets of grad_out map to flipped kernel offsets
    return acc.reshape(k, kh, kw, c)[:, ::-1, ::-1, :].transpose(0, 3, 1, 2).copy()


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True
                    ) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_forward(x, weight, bias)) with
    respect to input, weight, and bias."""
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    if grad_out.shape != (n, k, h, w):
        raise ShapeError(
            f"conv2d grad_out must be {(n, k, h, w)}, got {grad_out.shape}")
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    if k < c:
        grad_weight = _grad_weight_from_output_patches(x, grad_out, kh, kw)
    else:
        grad_weight = _grad_weight_from_input_patches(x, grad_out, kh, kw)
    grad_input = None
    if need_input_grad:
        # grad wrt input is another same-padded correlation, with the kernel
        # spatially flipped and its in/out channel axes swapped
        w_flip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_input = conv2d_forward(grad_out, np.ascontiguousarray(w_flip))
    return grad_input, grad_weight, grad_bias


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(N, C*r^2, H, W) -> (N, C, rH, rW) sub-pixel rearrangement where
    out[n,c,i*r+u,j*r+v] = in[n, c*r^2 + u*r + v, i, j]."""
    n, cr2, h, w = x.shape
    if cr2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}, got {cr2}")
    c = cr2 // (r * r)
    return (x.reshape(n, c, r, r, h, w)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(n, c, h * r, w * r).copy())


def pixel_shuffle_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    """Inverse index permutation of pixel_shuffle."""
    n, c, hr, wr = grad_out.shape
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"pixel_shuffle_backward needs dims divisible by {r}, "
                         f"got {hr}x{wr}")
    h, w = hr // r, wr // r
    return (grad_out.reshape(n, c, h, r, w, r)
                    .transpose(0, 1, 3, 5, 2, 4)
                    .reshape(n, c * r * r, h, w).copy())


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    """x for x > 0, slope*x otherwise."""
    if not 0.0 <= slope < 1.0:
        raise ShapeError(f"leaky_relu slope must be in [0,1), got {slope}")
    return np.where(x > 0, x, x * np.asarray(slope, dtype=x.dtype))


def leaky_relu_backward(out: np.ndarray, slope: float,
                        grad_out: np.ndarray) -> np.ndarray:
    """Backward from the forward *output*; out > 0 iff input > 0 for
    slope > 0, and at exactly 0 the slope branch is used."""
    if out.shape != grad_out.shape:
        raise ShapeError(f"leaky_relu grad shape {grad_out.shape} != {out.shape}")
    return np.where(out > 0, grad_out, grad_out * np.asarray(slope, dtype=grad_out.dtype))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum; broadcasting is deliberately not supported."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along the channel axis of (N,C,H,W) arrays."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat shape mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, first: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of concat_channels: split channels into (first, rest)."""
    if not 0 < first < x.shape[1]:
        raise ShapeError(f"cannot split {x.shape[1]} channels at {first}")
    return x[:, :first].copy(), x[:, first:].copy()


def nearest_upsample(x: np.ndarray, factor: int = 4) -> np.ndarray:
    """Repeat each pixel factor x factor times."""
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    rep = np.broadcast_to(x[:, :, :, None, :, None],
                          (n, c, h, factor, w, factor))
    return rep.reshape(n, c, h * factor, w * factor)


def nearest_upsample_backward(grad_out: np.ndarray, factor: int = 4) -> np.ndarray:
    """Sum gradients over each factor x factor block."""
    n, c, hf, wf = grad_out.shape
    if hf % factor != 0 or wf % factor != 0:
        raise ShapeError(f"grad dims {hf}x{wf} not divisible by {factor}")
    h, w = hf // factor, wf // factor
    return grad_out.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))


# raw fixture format: int64 rank, int64 dims, float64 row-major payload,
# all little-endian

def save_tensor(path: str | Path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(struct.pack("<q", x.ndim))
        f.write(struct.pack(f"<{x.ndim}q", *x.shape))
        f.write(x.astype("<f8").tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        (rank,) = struct.unpack("<q", f.read(8))
        if rank < 0 or rank > 32:
            raise ShapeError(f"implausible tensor rank {rank} in {path}")
        dims = struct.unpack(f"<{rank}q", f.read(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(f.read(8 * count), dtype="<f8", count=count)
    return data.reshape(dims).copy()
