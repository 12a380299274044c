"""Dense (H, W, C) float32 grids and the 3x3 spatial primitives built on them.

Grids are plain numpy arrays in row-major (row, column, channel) order;
binary masks are (H, W) bool arrays.  All borders are zero padded.
"""

from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import ContractError

DTYPE = np.float32


@dataclass
class Kernel3x3:
    """3x3 convolution weights ``(out, in, 3, 3)`` plus a length-``out`` bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ContractError(f"kernel weights must be (out, in, 3, 3), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ContractError(
                f"bias length {self.bias.shape} does not match out_channels {self.weights.shape[0]}"
            )

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    def matrix(self):
        """Weights as a ``(9 * in, out)`` matrix with rows ordered (dy, dx, in)."""
        return np.ascontiguousarray(self.weights.transpose(2, 3, 1, 0).reshape(-1, self.out_channels))

    @classmethod
    def from_matrix(cls, mat, bias):
        mat = np.asarray(mat)
        out = mat.shape[1]
        cin = mat.shape[0] // 9
        return cls(mat.reshape(3, 3, cin, out).transpose(3, 2, 0, 1).copy(), bias)

    @classmethod
    def identity(cls, channels, dtype=DTYPE):
        w = np.zeros((channels, channels, 3, 3), dtype=dtype)
        for c in range(channels):
            w[c, c, 1, 1] = 1
        return cls(w, np.zeros(channels, dtype=dtype))


def as_grid(values, dtype=DTYPE):
    """Promote a 2D array to a single-channel grid; 3D arrays pass through."""
    a = np.asarray(values, dtype=dtype)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ContractError(f"a grid must be (H, W) or (H, W, C), got shape {a.shape}")
    return a


def pad1(x):
    """Zero-pad the two spatial axes (the ones just before the channel axis)."""
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(x, pad)


def im2col(x):
    """All 3x3 patches of an (..., H, W, C) grid as rows of length 9C."""
    h, w, c = x.shape[-3:]
    p = pad1(x)
    cols = [p[..., dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1)


def conv3x3(x, kernel):
    """Zero-padded 3x3 cross-correlation of a grid (or batch of grids)."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ContractError(f"expected (H, W, C) input, got shape {x.shape}")
    if x.shape[-1] != kernel.in_channels:
        raise ContractError(
            f"input has {x.shape[-1]} channels but kernel expects {kernel.in_channels}"
        )
    out = im2col(x) @ kernel.matrix().astype(x.dtype, copy=False)
    out += kernel.bias.astype(x.dtype, copy=False)
    return out


def neighborhood_max(x, channel=0):
    """Per-pixel max of one channel over its 3x3 window; returns an (H, W, 1) grid."""
    x = np.asarray(x)
    if not 0 <= channel < x.shape[-1]:
        raise ContractError(f"channel {channel} out of range for {x.shape[-1]} channels")
    return _accel.nbmax3(np.ascontiguousarray(x[..., channel]))[..., None]


def concat_channels(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ContractError(f"spatial shapes differ: {a.shape[:-1]} vs {b.shape[:-1]}")
    return np.concatenate([a, b], axis=-1)
