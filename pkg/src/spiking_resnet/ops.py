"""Dense-tensor primitives shared by the ANN forward pass, the conversion
analysis, and the spiking simulator.

Conventions:
  - activations are float32 arrays shaped (C, H, W), with an optional leading
    batch axis (N, C, H, W);
  - convolution weights are shaped (outC, inC, kH, kW), fully-connected
    weights (out, in);
  - convolution is cross-correlation (no kernel flip);
  - reductions inside conv2d / fully_connected accumulate in float64 and the
    result is stored as float32, which bounds drift on deeper nets.

Everything here is a pure function over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError

DTYPE = np.float32


class precision:
    """Temporarily change the storage dtype of all ops (and of backprop,
    which follows it). Used by finite-difference gradient verification,
    where float32 rounding would otherwise drown the comparison."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        global DTYPE
        self._saved = DTYPE
        DTYPE = self.dtype
        return self

    def __exit__(self, *exc):
        global DTYPE
        DTYPE = self._saved
        return False


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return (N,C,H,W) view of x and whether a batch axis was added."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError("ndim", "3 or 4", x.ndim, "activation tensor")


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
           dtype=None) -> np.ndarray:
    """Unfold (N,C,H,W) into (N, C*kh*kw, OH*OW) patch columns.

    `dtype` fuses the cast into the unavoidable gather copy.
    """
    n, c, h, w = x.shape
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, OH, OW, kh, kw)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).astype(dtype or x.dtype)
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """2-D cross-correlation plus per-channel bias.

    Output shape is (outC, (H+2p-kH)//s+1, (W+2p-kW)//s+1), batched if the
    input carries a batch axis.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    xb, squeeze = _as_batched(x)
    if weights.ndim != 4:
        raise ShapeMismatchError("weights.ndim", 4, weights.ndim, "conv2d")
    oc, ic, kh, kw = weights.shape
    n, c, h, w = xb.shape
    if c != ic:
        raise ShapeMismatchError("in_channels", ic, c, "conv2d")
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(
            "spatial", "output dims >= 1", f"{oh}x{ow}", "conv2d"
        )
    cols = im2col(xb, kh, kw, stride, padding, dtype=np.float64)
    wmat = weights.reshape(oc, -1).astype(np.float64)
    out = np.matmul(wmat, cols)  # (N, OC, OH*OW)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != oc:
            raise ShapeMismatchError("bias_channels", oc, bias.shape[0], "conv2d")
        out += bias[:, None]
    out = out.reshape(n, oc, oh, ow).astype(DTYPE)
    return out[0] if squeeze else out


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0, dtype=DTYPE)


@dataclass
class BatchNormParams:
    """Per-channel batch-norm statistics and affine parameters.

    `var` holds the per-channel variance; normalisation divides by
    sqrt(var + epsilon).
    """

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=DTYPE).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=DTYPE).reshape(-1)
        self.mean = np.asarray(self.mean, dtype=DTYPE).reshape(-1)
        self.var = np.asarray(self.var, dtype=DTYPE).reshape(-1)
        if not (
            self.gamma.shape == self.beta.shape == self.mean.shape == self.var.shape
        ):
            raise ShapeMismatchError(
                "channels",
                self.gamma.shape,
                (self.beta.shape, self.mean.shape, self.var.shape),
                "BatchNormParams",
            )
        if np.any(self.var < 0):
            raise ValueError("variance entries must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x: np.ndarray, p: BatchNormParams) -> np.ndarray:
    """Per-channel y = gamma * (x - mean) / sqrt(var + eps) + beta."""
    xb, squeeze = _as_batched(x)
    if xb.shape[1] != p.channels:
        raise ShapeMismatchError("channels", p.channels, xb.shape[1], "batchnorm")
    inv = (p.gamma.astype(np.float64) / np.sqrt(p.var.astype(np.float64) + p.epsilon))
    shape = (1, -1, 1, 1)
    out = (xb.astype(np.float64) - p.mean.reshape(shape)) * inv.reshape(shape)
    out += p.beta.reshape(shape)
    out = out.astype(DTYPE)
    return out[0] if squeeze else out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean; output shape (C, 1, 1) (batched if input is)."""
    xb, squeeze = _as_batched(x)
    out = xb.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
    return out[0] if squeeze else out


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """y = W x + b on flattened features; accepts (F,), (N,F) or (C,H,W)/(N,C,H,W)."""
    if weights.ndim != 2:
        raise ShapeMismatchError("weights.ndim", 2, weights.ndim, "fully_connected")
    out_dim, in_dim = weights.shape
    if x.ndim in (3, 4):
        lead = x.shape[0] if x.ndim == 4 else None
        flat = x.reshape(lead, -1) if lead is not None else x.reshape(-1)
    else:
        flat = x
    squeeze = flat.ndim == 1
    if squeeze:
        flat = flat[None]
    if flat.shape[1] != in_dim:
        raise ShapeMismatchError("in_features", in_dim, flat.shape[1], "fully_connected")
    out = np.matmul(flat.astype(np.float64), weights.astype(np.float64).T)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != out_dim:
            raise ShapeMismatchError("bias_dim", out_dim, bias.shape[0], "fully_connected")
        out += bias
    out = out.astype(DTYPE)
    return out[0] if squeeze else out


def percentile(values, p: float) -> float:
    """Sorted linear-interpolation percentile of a flat collection.

    `p` is a fraction in (0, 1]; p == 1 returns the maximum. The estimator
    sorts the data and interpolates linearly at fractional index p*(n-1),
    so results are reproducible bit-for-bit.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"percentile fraction must be in (0, 1], got {p}")
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("percentile of an empty collection")
    v = np.sort(v)
    idx = p * (v.size - 1)
    lo = math.floor(idx)
    if lo == idx:
        return float(v[lo])
    return float(v[lo] + (idx - lo) * (v[lo + 1] - v[lo]))


@dataclass
class TailRecorder:
    """Streaming recorder exact for percentiles at fraction >= `p`.

    Retains everything until `retain_limit` values have been stored, then
    compresses to the sorted top fraction (with generous headroom), so the
    final percentile is still computed from exact order statistics.
    """

    p: float
    retain_limit: int = 10_000_000
    _chunks: list = field(default_factory=list, repr=False)
    _stored: int = 0
    _total: int = 0
    _discarded: int = 0
    _cutoff: float = -np.inf

    def add(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=DTYPE).ravel()
        if v.size == 0:
            return
        self._chunks.append(v.copy())
        self._stored += v.size
        self._total += v.size
        if self._stored > self.retain_limit:
            self._compress()

    def _keep_count(self) -> int:
        # 4x headroom over the tail actually needed for interpolation at p.
        return max(int(math.ceil((1.0 - self.p) * self._total * 4)) + 16, 4096)

    def _compress(self) -> None:
        merged = np.sort(np.concatenate(self._chunks))
        keep = min(self._keep_count(), merged.size)
        kept = merged[merged.size - keep:]
        self._discarded += merged.size - keep
        if merged.size > keep:
            self._cutoff = max(self._cutoff, float(kept[0]))
        self._chunks = [kept]
        self._stored = kept.size

    @property
    def count(self) -> int:
        return self._total

    def percentile(self, p: float | None = None) -> float:
        """Exact percentile over everything added; `p` defaults to self.p."""
        if p is None:
            p = self.p
        if p < self.p and self._discarded:
            raise ValueError(
                f"recorder compressed for fraction {self.p}; cannot answer {p}"
            )
        if self._total == 0:
            raise ValueError("percentile of an empty recorder")
        merged = np.sort(np.concatenate(self._chunks)) if self._chunks else np.empty(0)
        idx = p * (self._total - 1)
        j = idx - self._discarded
        if j < 0 or (self._discarded and merged[math.floor(j)] < self._cutoff):
            raise ValueError("requested rank was discarded by compression")
        lo = math.floor(j)
        if lo == j:
            return float(merged[lo])
        return float(merged[lo] + (j - lo) * (merged[lo + 1] - merged[lo]))
