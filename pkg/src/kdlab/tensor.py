"""Dense numeric kernels and seeded randomness.

Tensors are plain ``numpy.ndarray`` objects stored as float32. The public
``matmul`` and ``conv2d`` accumulate in float64. The batched kernels used by
the layers (``conv2d_forward``/``conv2d_backward``, pooling) compute in the
dtype they are handed: float32 BLAS during training, float64 end to end for
the gradient checker.

Convolution output extents:

* ``valid``: ``out = (n - k) // stride + 1``
* ``same``:  ``out = ceil(n / stride)``; the total padding
  ``max((out - 1) * stride + k - n, 0)`` is split with the extra pixel on the
  bottom/right.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ShapeError

FLOAT = np.float32


def matmul(a, b):
    """Matrix product with float64 accumulation, returned in float32."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(FLOAT)


# -- convolution -----------------------------------------------------------


def conv_output_size(n, k, stride, padding):
    if padding == "valid":
        return (n - k) // stride + 1
    if padding == "same":
        return -(-n // stride)
    raise ValueError(f"unknown padding {padding!r}")


def _pads(n, k, stride, padding):
    if padding == "valid":
        return 0, 0
    out = conv_output_size(n, k, stride, padding)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _check_conv(x, w, stride, padding):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding not in ("valid", "same"):
        raise ShapeError(f"padding must be 'valid' or 'same', got {padding!r}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects input c×h×w and kernels c_out×c_in×kh×kw, "
                         f"got {x.shape[1:]} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {w.shape[1]}")
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    pt, pb = _pads(h, kh, stride, padding)
    pl, pr = _pads(wd, kw, stride, padding)
    if kh > h + pt + pb or kw > wd + pl + pr:
        raise ShapeError(f"kernel {kh}×{kw} larger than padded input {h + pt + pb}×{wd + pl + pr}")
    return (pt, pb), (pl, pr)


def _pad(x, kh, kw, stride, padding):
    _, _, h, w = x.shape
    (pt, pb) = _pads(h, kh, stride, padding)
    (pl, pr) = _pads(w, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return x, (pt, pl)


def im2col(x, kh, kw, stride, padding):
    """Unfold a B×C×H×W batch into a (C·kh·kw)×(B·Ho·Wo) patch matrix.

    Rows are ordered (c, i, j) to match ``kernels.reshape(c_out, -1)``.
    """
    b, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp, _ = _pad(x, kh, kw, stride, padding)
    xc = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, b * ho * wo), (ho, wo)


def conv2d_forward(x, w, stride=1, padding="valid"):
    """Batched cross-correlation. Returns the output and the patch matrix."""
    _check_conv(x, w, stride, padding)
    b = x.shape[0]
    c_out, _, kh, kw = w.shape
    cols, (ho, wo) = im2col(x, kh, kw, stride, padding)
    out = w.reshape(c_out, -1) @ cols
    return out.reshape(c_out, b, ho, wo).transpose(1, 0, 2, 3), cols


def conv2d(x, kernels, stride=1, padding="valid"):
    """Direct cross-correlation (no kernel flip) of c×h×w or B×c×h×w input.

    Accumulates in float64 and returns float32 (float64 if either operand is).
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    single = x.ndim == 3
    if single:
        x = x[None]
    dtype = np.result_type(x.dtype, kernels.dtype, FLOAT)
    out, _ = conv2d_forward(x.astype(np.float64), kernels.astype(np.float64), stride, padding)
    out = out.astype(dtype)
    return out[0] if single else out


def conv2d_backward(x_shape, w, cols, dout, stride=1, padding="valid"):
    """Gradients of a conv2d_forward call w.r.t. its input and kernels."""
    b, c, h, wd = x_shape
    c_out, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dmat = dout.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    dcols = (w.reshape(c_out, -1).T @ dmat).reshape(c, kh, kw, b, ho, wo)
    pt, pb = _pads(h, kh, stride, padding)
    pl, pr = _pads(wd, kw, stride, padding)
    dxp = np.zeros((c, b, h + pt + pb, wd + pl + pr), dtype=dout.dtype)
    # fixed i, j order keeps the scatter-add deterministic
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return dxp[:, :, pt:pt + h, pl:pl + wd].transpose(1, 0, 2, 3), dw


# -- pooling ---------------------------------------------------------------


def maxpool2(x):
    """Non-overlapping 2×2 max pooling.

    Returns the pooled tensor and the within-window argmax (0..3, row-major);
    ties go to the lowest index.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}×{w}")
    b, c = x.shape[:2]
    win = x.reshape(b, c, h // 2, 2, w // 2, 2)
    tl, tr = win[:, :, :, 0, :, 0], win[:, :, :, 0, :, 1]
    bl, br = win[:, :, :, 1, :, 0], win[:, :, :, 1, :, 1]
    top, bottom = np.maximum(tl, tr), np.maximum(bl, br)
    out = np.maximum(top, bottom)
    # strict comparisons: on ties the earlier (lower) position wins
    idx = np.where(bottom > top, (br > bl).astype(np.int8) + 2, (tr > tl).astype(np.int8))
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2_backward(dout, idx):
    """Route pooled gradients back to the stored argmax positions."""
    single = dout.ndim == 3
    if single:
        dout, idx = dout[None], idx[None]
    b, c, hh, wh = dout.shape
    dx = np.zeros((b, c, hh * 2, wh * 2), dtype=dout.dtype)
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, di::2, dj::2] = np.where(idx == k, dout, 0)
    return dx[0] if single else dx


# -- randomness ------------------------------------------------------------


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts (sha256-based)."""
    text = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


class SeededRng:
    """Deterministic random stream.

    Raw 64-bit words come from numpy's PCG64 bit generator, whose output
    stream for a given seed is fixed across platforms and numpy releases.
    Everything else is derived here rather than through ``numpy.random.Generator``
    (whose distribution algorithms are not frozen):

    * uniform float64: top 53 bits of a word times 2**-53, in [0, 1)
    * uniform float32: top 24 bits times 2**-24, in [0, 1)
    * standard normal: Box-Muller on pairs of float64 uniforms,
      ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``
    * permutations: stable argsort of float64 uniforms

    Not thread-safe; give each worker its own ``spawn``-ed child.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n):
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def uniform(self, shape, dtype=np.float64):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        words = self.raw(n)
        if np.dtype(dtype) == np.float32:
            u = (words >> np.uint64(40)).astype(np.float32) * np.float32(2.0 ** -24)
        else:
            u = (words >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def normal(self, shape, dtype=np.float64):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return z.reshape(shape).astype(dtype)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n, k):
        """k distinct indices from range(n), uniformly."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def spawn(self, *key) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *key))


def rng_draw(rng: SeededRng, n: int, dist: str = "uniform01"):
    """Draw ``n`` float32 samples, advancing ``rng``."""
    if dist == "uniform01":
        return rng.uniform(n, dtype=np.float32)
    if dist == "standard_normal":
        return rng.normal(n, dtype=np.float32)
    raise ValueError(f"unknown distribution {dist!r}")
