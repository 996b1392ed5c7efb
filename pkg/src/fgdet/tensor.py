"""Dense array kernels for toy-scale forward inference.

Feature maps are ``float32`` arrays of shape ``(H, W, C)``; convolution kernels
are ``(K, K, Cin, Cout)``. Every function returns a new array and never mutates
its inputs. Arithmetic is done in float64 and rounded to float32 on output.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fgdet.errors import ShapeError

DTYPE = np.float32


def as_tensor(x, ndim=3):
    """Return ``x`` as a read-only float32 array, checking rank and extents."""
    arr = np.array(x, dtype=DTYPE, copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"expected rank {ndim}, got shape {arr.shape}", ("rank",))
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}", ("shape",))
    arr.flags.writeable = False
    return arr


def _freeze(arr):
    out = np.ascontiguousarray(arr, dtype=DTYPE)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrays = {}
        for name in ("gamma", "beta", "mean", "var"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            arrays[name] = a
            object.__setattr__(self, name, a)
        n = {len(a) for a in arrays.values()}
        if len(n) != 1:
            raise ShapeError(
                "batch-norm arrays differ in length: "
                + ", ".join(f"{k}={len(v)}" for k, v in arrays.items()),
                tuple(arrays),
            )
        if np.any(self.var < 0):
            raise ValueError("batch-norm variance must be non-negative")
        # eps == 0 is accepted so that unit-variance identity checks are exact
        if not self.eps >= 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")

    @property
    def channels(self):
        return len(self.gamma)

    @classmethod
    def identity(cls, channels, eps=0.0):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)


def conv2d(x, weights, stride=1, padding=0):
    """2-D cross-correlation of an HWC map with a KKIO kernel, zero padded, no bias.

    Output extent per spatial axis is ``(H + 2*padding - K) // stride + 1``.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 3:
        raise ShapeError(f"input must be H x W x C, got {x.shape}", ("input.rank",))
    if weights.ndim != 4:
        raise ShapeError(f"weights must be K x K x Cin x Cout, got {weights.shape}", ("weights.rank",))
    kh, kw, cin, cout = weights.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}", ("weights.K0", "weights.K1"))
    if kh % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}", ("weights.K",))
    if cin != x.shape[2]:
        raise ShapeError(
            f"weights Cin={cin} does not match input C={x.shape[2]}", ("weights.Cin", "input.C")
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    h, w = x.shape[:2]
    if h + 2 * padding < kh or w + 2 * padding < kh:
        raise ShapeError(
            f"kernel {kh} larger than padded input {h + 2 * padding}x{w + 2 * padding}",
            ("input.H", "input.W", "weights.K"),
        )
    xp = np.pad(x.astype(np.float64), ((padding, padding), (padding, padding), (0, 0)))
    # (H', W', C, K, K) view, strided
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    out = np.einsum("hwcij,ijco->hwo", win, weights.astype(np.float64), optimize=True)
    return _freeze(out)


def maxpool2d(x, kernel, stride=1, padding=0):
    """Max pooling with -inf padding, so padded cells are never selected.

    Even kernels are accepted; stride 1 with ``padding = (kernel - 1) // 2`` and
    an odd kernel preserves the spatial shape.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"input must be H x W x C, got {x.shape}", ("input.rank",))
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid kernel={kernel} / stride={stride} / padding={padding}")
    h, w = x.shape[:2]
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(
            f"pool kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}",
            ("input.H", "input.W", "kernel"),
        )
    xp = np.pad(
        x.astype(DTYPE),
        ((padding, padding), (padding, padding), (0, 0)),
        constant_values=-np.inf,
    )
    win = sliding_window_view(xp, (kernel, kernel), axis=(0, 1))[::stride, ::stride]
    return _freeze(win.max(axis=(-2, -1)))


def upsample2x(x):
    """Nearest-neighbour 2x upsampling: every cell becomes a 2 x 2 block."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"input must be H x W x C, got {x.shape}", ("input.rank",))
    return _freeze(np.repeat(np.repeat(x, 2, axis=0), 2, axis=1))


def concat_channels(inputs):
    """Concatenate HWC maps along C, in input order."""
    inputs = [np.asarray(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input", ("inputs",))
    spatial = {t.shape[:2] for t in inputs}
    if any(t.ndim != 3 for t in inputs) or len(spatial) != 1:
        raise ShapeError(
            "spatial dims differ: " + ", ".join(str(t.shape) for t in inputs), ("H", "W")
        )
    return _freeze(np.concatenate(inputs, axis=2))


def batchnorm_apply(x, params):
    """Inference-mode batch norm: ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    x = np.asarray(x)
    if x.shape[-1] != params.channels:
        raise ShapeError(
            f"batch-norm has {params.channels} channels, input has {x.shape[-1]}",
            ("params.C", "input.C"),
        )
    scale = params.gamma / np.sqrt(params.var + params.eps)
    out = (x.astype(np.float64) - params.mean) * scale + params.beta
    return _freeze(out)
