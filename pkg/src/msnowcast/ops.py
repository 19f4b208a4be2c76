"""Differentiable operations used by the nowcasting network.

Convolutions run through a strided-window (im2col) path backed by a
single BLAS contraction; :func:`conv2d_direct` keeps the plain
offset-accumulation formulation as a reference.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ConfigurationError, Tensor, as_tensor, make_result

DEFAULT_LEAKY_SLOPE = 0.2


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """View of shape [B, C, ho, wo, k, k] over a padded input."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _col2im(cols: np.ndarray, size_h: int, size_w: int, s: int) -> np.ndarray:
    """Scatter-add columns [B, ho, wo, C, k, k] into a [B, C, size_h, size_w] canvas."""
    b, ho, wo, c, k, _ = cols.shape
    out = np.zeros((b, c, size_h, size_w), dtype=cols.dtype)
    span_h = (ho - 1) * s + 1
    span_w = (wo - 1) * s + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + span_h : s, j : j + span_w : s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    k = w.shape[-1]
    ho = conv_out_size(x.shape[2], k, s, p)
    wo = conv_out_size(x.shape[3], k, s, p)
    win = _windows(_pad(x, p), k, s, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, ho, wo, Cout]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_h: int, in_w: int, s: int, p: int) -> np.ndarray:
    cols = np.tensordot(g.transpose(0, 2, 3, 1), w, axes=([3], [0]))  # [B, ho, wo, Cin, k, k]
    full = _col2im(cols, in_h + 2 * p, in_w + 2 * p, s)
    if p:
        full = full[:, :, p : p + in_h, p : p + in_w]
    return np.ascontiguousarray(full)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    ho, wo = g.shape[2], g.shape[3]
    win = _windows(_pad(x, p), k, s, ho, wo)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout, Cin, k, k]


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor | None, in_axis: int, stride: int) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ConfigurationError(f"square kernels only, got {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels but weight {weight.shape} expects {weight.shape[in_axis]}"
        )
    out_axis = 1 - in_axis
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ConfigurationError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [B,Cin,H,W] with weight [Cout,Cin,k,k], zero padded."""
    _check_conv_args(x, weight, bias, 1, stride)
    k = weight.shape[-1]
    h, w = x.shape[2], x.shape[3]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ConfigurationError(f"kernel {k} larger than padded input {h}x{w} (padding {padding})")
    out = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gx = _conv_input_grad(g, weight.data, h, w, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, k, stride, padding) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, lambda g: grad_fn(g)[: len(inputs)], "conv2d")


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Reference convolution accumulating one kernel offset at a time (no graph)."""
    cout, cin, k, _ = weight.shape
    b, _, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    xp = _pad(x, padding)
    out = np.zeros((b, cout, ho, wo), dtype=np.result_type(x, weight))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
            out += np.einsum("bchw,oc->bohw", patch, weight[:, :, i, j])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; weight is [Cin, Cout, k, k].

    Output side is (H-1)*stride - 2*padding + k. This is exactly the
    input-gradient map of :func:`conv2d` with the same kernel.
    """
    _check_conv_args(x, weight, bias, 0, stride)
    k = weight.shape[-1]
    h, w = x.shape[2], x.shape[3]
    oh = conv_transpose_out_size(h, k, stride, padding)
    ow = conv_transpose_out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"transposed conv output would be {oh}x{ow}")
    out = _conv_input_grad(x.data, weight.data, oh, ow, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gx = _conv_forward(g, weight.data, stride, padding) if x.requires_grad else None
        # windows over the padded output gradient contracted with the input: [Cin, Cout, k, k]
        gw = _conv_weight_grad(g, x.data, k, stride, padding) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, lambda g: grad_fn(g)[: len(inputs)], "conv_transpose2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"group_norm expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"affine params must have shape ({c},)")
    xg = x.data.reshape(b, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(b, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def grad_fn(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            n = xg.shape[2]
            dxhat = (g * gamma.data[None, :, None, None]).reshape(b, groups, n)
            xh = xhat.reshape(b, groups, n)
            gx = inv_std * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(b, c, h, w)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), grad_fn, "group_norm")


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return make_result(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def activation(x: Tensor, kind: str, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ConfigurationError(f"unknown elementwise op {kind!r}")
    return ops[kind](a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return make_result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ConfigurationError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels: incompatible shapes {[q.shape for q in parts]}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return make_result(out, tuple(parts), grad_fn, "concat_channels")


def split_channels(x: Tensor, n: int) -> list[Tensor]:
    """Split [B,C,...] into n equal channel blocks."""
    c = x.shape[1]
    if c % n:
        raise ConfigurationError(f"cannot split {c} channels into {n} blocks")
    size = c // n
    out = []
    for i in range(n):
        lo, hi = i * size, (i + 1) * size

        def grad_fn(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        out.append(make_result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), grad_fn, "split_channels"))
    return out


def stack_time(frames: Sequence[Tensor]) -> Tensor:
    """Stack per-step [B,...] tensors into [B,T,...]."""
    if not frames:
        raise ConfigurationError("stack_time needs at least one frame")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ConfigurationError("stack_time: frames differ in shape")
    out = np.stack([f.data for f in frames], axis=1)
    return make_result(out, tuple(frames), lambda g: tuple(g[:, t] for t in range(len(frames))), "stack_time")


def select_time(x: Tensor, t: int) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, t] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, t]), (x,), grad_fn, "select_time")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def temporal_weighted_sum(hs: Tensor, w: Tensor) -> Tensor:
    """sum_i w[i] * hs[:, i] for hs [B,m,C,H,W]; returns [B,1,C,H,W]."""
    if hs.ndim != 5:
        raise ConfigurationError(f"expected [B,m,C,H,W], got {hs.shape}")
    m = hs.shape[1]
    if w.shape != (m,):
        raise ConfigurationError(f"weight vector of length {w.shape} does not match m={m}")
    out = np.zeros((hs.shape[0], 1) + hs.shape[2:], dtype=np.result_type(hs.data, w.data))
    for i in range(m):
        out[:, 0] += w.data[i] * hs.data[:, i]

    def grad_fn(g):
        gh = gw = None
        if hs.requires_grad:
            gh = g * w.data[None, :, None, None, None]
        if w.requires_grad:
            gw = np.einsum("bmchw,bchw->m", hs.data, g[:, 0])
        return gh, gw

    return make_result(out, (hs, w), grad_fn, "temporal_weighted_sum")


def interp_weights(k: int, t_out: int) -> np.ndarray:
    """Matrix [t_out, k] mapping k evenly spaced frames to t_out frames linearly."""
    if t_out < 1:
        raise ConfigurationError("t_out must be >= 1")
    if k == t_out:
        return np.eye(k)
    if k < 2:
        raise ConfigurationError(f"need at least 2 frames to interpolate, got {k}")
    pos = np.linspace(0.0, 1.0, t_out) * (k - 1) if t_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), k - 2)
    frac = pos - lo
    m = np.zeros((t_out, k))
    m[np.arange(t_out), lo] = 1.0 - frac
    m[np.arange(t_out), lo + 1] += frac
    return m


def temporal_linear_interp(x: Tensor, t_out: int) -> Tensor:
    """Resample [B,K,...] to [B,t_out,...]; endpoints preserved."""
    k = x.shape[1]
    m = interp_weights(k, t_out).astype(x.dtype)
    if k == t_out:
        return x
    out = np.ascontiguousarray(np.moveaxis(np.tensordot(m, x.data, axes=([1], [1])), 0, 1))

    def grad_fn(g):
        return (np.ascontiguousarray(np.moveaxis(np.tensordot(m.T, g, axes=([1], [1])), 0, 1)),)

    return make_result(out, (x,), grad_fn, "temporal_linear_interp")
