"""Convolution geometry and im2col-style patch lowering for m-D inputs."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np


class GeometryError(ValueError):
    pass


def _tuple(value, m, name):
    if np.isscalar(value):
        return (int(value),) * m
    value = tuple(int(v) for v in value)
    if len(value) != m:
        raise GeometryError(f"{name} has {len(value)} entries, expected {m}")
    return value


@dataclass(frozen=True)
class ConvGeometry:
    """Per spatial dimension: input size, kernel, stride, padding, dilation."""

    w_in: tuple
    kernel: tuple
    stride: tuple = 1
    padding: tuple = 0
    dilation: tuple = 1

    def __post_init__(self):
        m = 1 if np.isscalar(self.w_in) else len(self.w_in)
        for name in ("w_in", "kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _tuple(getattr(self, name), m, name))
        if any(v < 1 for v in self.w_in + self.kernel + self.stride + self.dilation):
            raise GeometryError(f"sizes, strides and dilations must be >= 1: {self}")
        if any(p < 0 for p in self.padding):
            raise GeometryError(f"padding must be >= 0: {self}")

    @property
    def ndim(self) -> int:
        return len(self.w_in)


def conv_out_size(geom: ConvGeometry) -> tuple:
    """Output size per dimension:
    ``floor((w_in + 2p - d(k-1) - 1) / s + 1)``."""
    out = []
    for w, k, s, p, d in zip(geom.w_in, geom.kernel, geom.stride, geom.padding, geom.dilation):
        span = w + 2 * p - d * (k - 1) - 1
        # floor(span/s + 1); span < 0 means the kernel does not fit at all
        size = span // s + 1 if span >= 0 else 0
        if size < 1:
            raise GeometryError(
                f"kernel {k} (dilation {d}) does not fit input {w} with padding {p}"
            )
        out.append(size)
    return tuple(out)


def _gather_index(geom: ConvGeometry, w_out):
    m = geom.ndim
    index = []
    for i in range(m):
        o = np.arange(w_out[i]) * geom.stride[i]
        j = np.arange(geom.kernel[i]) * geom.dilation[i]
        idx = o[:, None] + j[None, :]
        # all m index arrays must broadcast to (w_out..., k...)
        full = [1] * (2 * m)
        full[i] = w_out[i]
        full[m + i] = geom.kernel[i]
        index.append(idx.reshape(full))
    return tuple(index)


def im2col(x: np.ndarray, geom: ConvGeometry):
    """Lower ``x`` of shape (N, C, *w_in) to a patch matrix.

    Returns ``(cols, w_out)`` where ``cols`` has shape
    (N * prod(w_out), C * prod(kernel)); row order is sample-major then
    output position, column order is channel-major then kernel offset.
    """
    N, C = x.shape[:2]
    m = geom.ndim
    if tuple(x.shape[2:]) != geom.w_in:
        raise GeometryError(f"input spatial shape {x.shape[2:]} != {geom.w_in}")
    w_out = conv_out_size(geom)
    pad = [(0, 0), (0, 0)] + [(p, p) for p in geom.padding]
    xp = np.pad(x, pad) if any(geom.padding) else x
    patches = xp[(slice(None), slice(None)) + _gather_index(geom, w_out)]
    # (N, C, wo..., k...) -> (N, wo..., C, k...)
    order = [0] + list(range(2, 2 + m)) + [1] + list(range(2 + m, 2 + 2 * m))
    cols = patches.transpose(order).reshape(N * prod(w_out), C * prod(geom.kernel))
    return cols, w_out


def col2im(cols: np.ndarray, geom: ConvGeometry, n_samples: int, channels: int):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an input."""
    m = geom.ndim
    w_out = conv_out_size(geom)
    vals = cols.reshape((n_samples,) + w_out + (channels,) + geom.kernel)
    order = [0, 1 + m] + list(range(1, 1 + m)) + list(range(2 + m, 2 + 2 * m))
    vals = vals.transpose(order)
    padded = tuple(w + 2 * p for w, p in zip(geom.w_in, geom.padding))
    out = np.zeros((n_samples, channels) + padded, dtype=cols.dtype)
    np.add.at(out, (slice(None), slice(None)) + _gather_index(geom, w_out), vals)
    crop = tuple(slice(p, p + w) for p, w in zip(geom.padding, geom.w_in))
    return out[(slice(None), slice(None)) + crop]
