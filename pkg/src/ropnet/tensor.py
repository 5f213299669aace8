"""Dense NHWC tensors and the forward numeric kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 or float64.
Every kernel accepts an optional ``out`` array so that the planned runtime can
write straight into its arena; eager callers let the kernel allocate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ParameterError, ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def tensor(shape, data, dtype=np.float32) -> np.ndarray:
    """Build a row-major tensor owning a copy of ``data``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: rank and all extents must be >= 1")
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise ParameterError(f"unsupported dtype {dtype}")
    flat = np.array(data, dtype=dtype).reshape(-1)
    if flat.size != math.prod(shape):
        raise ShapeError(f"data length {flat.size} does not match shape {shape}")
    return flat.reshape(shape).copy()


@dataclass(frozen=True)
class ConvConfig:
    kernel_h: int
    kernel_w: int
    out_channels: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1 or self.out_channels < 1:
            raise ParameterError("kernel dims and out_channels must be positive")
        if self.stride not in (1, 2):
            raise ParameterError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ParameterError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    def output_hw(self, h, w):
        if self.padding == "same":
            return -(-h // self.stride), -(-w // self.stride)
        if h < self.kernel_h or w < self.kernel_w:
            raise ShapeError(f"input {h}x{w} smaller than kernel for 'valid' padding")
        return (h - self.kernel_h) // self.stride + 1, (w - self.kernel_w) // self.stride + 1

    def pads(self, h, w):
        """(top, left) zero padding; any odd remainder goes bottom/right."""
        if self.padding == "valid":
            return 0, 0
        ho, wo = self.output_hw(h, w)
        pad_h = max((ho - 1) * self.stride + self.kernel_h - h, 0)
        pad_w = max((wo - 1) * self.stride + self.kernel_w - w, 0)
        return pad_h // 2, pad_w // 2


def _float_array(x, name="input"):
    x = np.asarray(x)
    if x.dtype not in FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    return np.ascontiguousarray(x)


def _check_out(out, shape, dtype):
    if out is None:
        return np.empty(shape, dtype=dtype)
    if out.shape != tuple(shape) or out.dtype != dtype:
        raise ShapeError(f"out buffer {out.shape}/{out.dtype} != {tuple(shape)}/{dtype}")
    return out


def matmul(a, b, out=None):
    a = _float_array(a, "a")
    b = _float_array(b, "b").astype(a.dtype, copy=False)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _check_out(out, (a.shape[0], b.shape[1]), a.dtype)
    _kernels.matmul_into(a, b, out)
    return out


def conv2d(x, weights, cfg: ConvConfig, out=None):
    """Cross-correlate an NHWC batch with a [kh, kw, Cin, Cout] kernel."""
    x = _float_array(x)
    w = _float_array(weights, "weights").astype(x.dtype, copy=False)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    if w.shape[:2] != (cfg.kernel_h, cfg.kernel_w) or w.ndim != 4 or w.shape[3] != cfg.out_channels:
        raise ShapeError(f"weights {w.shape} do not match {cfg}")
    if w.shape[2] != x.shape[3]:
        raise ShapeError(f"channel mismatch: input has {x.shape[3]}, weights expect {w.shape[2]}")
    n, h, wd, _ = x.shape
    ho, wo = cfg.output_hw(h, wd)
    pad_t, pad_l = cfg.pads(h, wd)
    out = _check_out(out, (n, ho, wo, cfg.out_channels), x.dtype)
    _kernels.conv2d_into(x, w, cfg.stride, pad_t, pad_l, out)
    return out


def depthwise_conv2d(x, weights, cfg: ConvConfig, out=None):
    """Per-channel cross-correlation with a [kh, kw, C] kernel.

    ``cfg.out_channels`` must equal the input channel count.
    """
    x = _float_array(x)
    w = _float_array(weights, "weights").astype(x.dtype, copy=False)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects NHWC input and [kh,kw,C] weights, got {x.shape}, {w.shape}")
    if w.shape[:2] != (cfg.kernel_h, cfg.kernel_w):
        raise ShapeError(f"weights {w.shape} do not match {cfg}")
    if w.shape[2] != x.shape[3] or cfg.out_channels != x.shape[3]:
        raise ShapeError(f"channel mismatch: input has {x.shape[3]}, weights have {w.shape[2]}")
    n, h, wd, c = x.shape
    ho, wo = cfg.output_hw(h, wd)
    pad_t, pad_l = cfg.pads(h, wd)
    out = _check_out(out, (n, ho, wo, c), x.dtype)
    _kernels.depthwise_into(x, w, cfg.stride, pad_t, pad_l, out)
    return out


def relu(x, out=None):
    x = np.asarray(x)
    return np.maximum(x, x.dtype.type(0), out=out)


def sigmoid(x, out=None):
    # Split by sign so exp never overflows.
    x = np.asarray(x)
    if out is None:
        out = np.empty_like(x)
    pos = x >= 0
    e = np.exp(-np.abs(x))
    np.divide(1, 1 + e, out=out, where=pos)
    np.divide(e, 1 + e, out=out, where=~pos)
    return out


def _check_bn_args(x, gamma, beta, eps):
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if x.ndim < 2:
        raise ShapeError(f"batch_norm expects channel-last input, got shape {x.shape}")
    c = x.shape[-1]
    for name, arr in (("gamma", gamma), ("beta", beta)):
        if np.shape(arr) != (c,):
            raise ShapeError(f"{name} must have shape ({c},), got {np.shape(arr)}")


def batch_stats(x):
    """Per-channel mean and biased variance over every axis but the last."""
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    var = ((flat - mean) ** 2).mean(axis=0)
    return mean, var


def batch_norm_infer(x, gamma, beta, mean, inv_std, out=None):
    """Affine normalization with precomputed ``inv_std = 1/sqrt(var+eps)``.

    Both the eager and planned engines call this exact sequence of ufuncs,
    which keeps their outputs bitwise identical.
    """
    out = np.subtract(x, mean, out=out)
    np.multiply(out, inv_std, out=out)
    np.multiply(out, gamma, out=out)
    np.add(out, beta, out=out)
    return out


def inverse_std(var, eps, dtype):
    var = np.asarray(var, dtype=dtype)
    return (1 / np.sqrt(var + dtype.type(eps))).astype(dtype)


def batch_norm(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.1, eps=1e-5):
    """Batch normalization over the channel (last) axis.

    In ``train`` mode the batch statistics normalize ``x`` and the running
    statistics are updated *in place*:
    ``running <- (1 - momentum) * running + momentum * batch``.
    In ``infer`` mode the running statistics are used and nothing mutates.
    """
    x = _float_array(x)
    _check_bn_args(x, gamma, beta, eps)
    dt = x.dtype
    gamma = np.asarray(gamma, dtype=dt)
    beta = np.asarray(beta, dtype=dt)
    if mode == "train":
        mean, var = batch_stats(x)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var
    elif mode == "infer":
        mean, var = np.asarray(running_mean, dtype=dt), np.asarray(running_var, dtype=dt)
    else:
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    return batch_norm_infer(x, gamma, beta, mean.astype(dt), inverse_std(var, eps, dt))


def flatten(x, out=None):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"flatten expects NHWC input, got shape {x.shape}")
    flat = x.reshape(x.shape[0], -1)
    if out is None:
        return flat.copy()
    out[...] = flat
    return out


def global_avg_pool(x, out=None):
    """Mean over the spatial axes: [N,H,W,C] -> [N,C]."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC input, got shape {x.shape}")
    return np.mean(x, axis=(1, 2), out=out)
