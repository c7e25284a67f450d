"""Wavelet convolution layer: forward transform, pooling, and backpropagation.

The layer convolves a segment against every sampled kernel (valid discrete
convolution, output width N - M + 1), standardizes each scale row, and keeps
the Q largest coefficient magnitudes per row together with their positions.
The backward pass routes gradients through the pooling winners, the
standardization moments, and the convolution into kernel taps, then contracts
tap gradients against the kernel Jacobians to produce gradients for all
p + 2n + m learnable wavelet scalars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError
from .wavelet import WaveletParams, all_kernel_jacobians, sample_all_kernels

# Rows whose standard deviation falls below this are mapped to all zeros.
STD_FLOOR = 1e-8

STD_MODES = ("std", "var", "off")


@dataclass
class FeatureMap:
    """Wavelet coefficients, one row per scale, one column per shift."""

    coefficients: np.ndarray  # (m, L)
    scales: np.ndarray        # (m,) dilations, row k <-> scales[k]


@dataclass
class PooledFeatures:
    """Per scale, the Q largest coefficient magnitudes and their columns."""

    values: np.ndarray          # (m, Q), non-increasing along each row
    source_indices: np.ndarray  # (m, Q), distinct within a row


def _valid_convolve(signal: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """out[tau] = sum_j signal[tau+j] * taps[M-1-j], accumulated in j order.

    The j-ascending accumulation makes the result bit-identical to a naive
    double loop over (tau, j).
    """
    width = signal.size - taps.size + 1
    out = np.zeros(width)
    for j in range(taps.size):
        out += signal[j:j + width] * taps[taps.size - 1 - j]
    return out


def _segment_windows(segments: np.ndarray, kernel_length: int) -> np.ndarray:
    """Contiguous (B, L, M) sliding windows; one copy, reused by backward."""
    return np.ascontiguousarray(
        sliding_window_view(segments, kernel_length, axis=1))


def _valid_convolve_batch(windows: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Batched valid convolution as one GEMM; matches _valid_convolve to ~1e-13."""
    batch, width, kernel_length = windows.shape
    flat = windows.reshape(-1, kernel_length) @ kernels[:, ::-1].T
    return flat.reshape(batch, width, kernels.shape[0]).transpose(0, 2, 1)


def wavelet_transform(segment, params: WaveletParams, kernel_length: int) -> FeatureMap:
    """Valid discrete convolution of one segment against all m sampled kernels."""
    seg = np.asarray(segment, dtype=float).reshape(-1)
    if seg.size < kernel_length:
        raise ShapeError(
            f"segment length {seg.size} shorter than kernel_length {kernel_length}"
        )
    kernels = sample_all_kernels(params, kernel_length)
    rows = np.stack([_valid_convolve(seg, taps) for taps in kernels])
    return FeatureMap(rows, params.dilations)


def _standardize_rows(rows: np.ndarray, mode: str):
    """Row-wise standardization on the trailing axis.

    Returns (y, std, live) where live marks rows with std >= STD_FLOOR; dead
    rows are zeroed.  mode 'std' divides by the standard deviation, 'var' by
    the variance (kept for fidelity experiments), 'off' is the identity.
    """
    if mode not in STD_MODES:
        raise ValueError(f"unknown standardization mode {mode!r}")
    if mode == "off":
        ones = np.ones(rows.shape[:-1] + (1,))
        return np.array(rows), ones, ones.astype(bool)
    centered = rows - rows.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", centered, centered)[..., None] / rows.shape[-1]
    std = np.sqrt(var)
    live = std >= STD_FLOOR
    denom = np.where(live, std if mode == "std" else var, 1.0)
    centered /= denom
    centered *= live  # zero out degenerate rows
    return centered, std, live


def standardize(fmap: FeatureMap, mode: str = "std") -> FeatureMap:
    """Each row to mean 0 / unit spread; near-constant rows become all zeros."""
    y, _, _ = _standardize_rows(fmap.coefficients, mode)
    return FeatureMap(y, fmap.scales.copy())


def _topq_rows_sorted(mag: np.ndarray, q: int):
    # stable sort on descending magnitude keeps lower indices first among ties
    order = np.argsort(-mag, axis=-1, kind="stable")[..., :q]
    return np.take_along_axis(mag, order, axis=-1), order


def _topq_rows(rows: np.ndarray, q: int):
    """Q largest magnitudes per row, ties broken by lower column index.

    Fast path partitions before sorting; rows where equal magnitudes straddle
    the partition boundary fall back to a full stable sort so tie-breaking
    stays exact.
    """
    mag = np.abs(rows)
    width = mag.shape[-1]
    if q * 4 >= width:
        return _topq_rows_sorted(mag, q)
    kept = np.argpartition(-mag, q - 1, axis=-1)[..., :q]
    kept.sort(axis=-1)  # ascending columns, so the stable sort below keeps low indices first
    candidates = np.take_along_axis(mag, kept, axis=-1)
    inner = np.argsort(-candidates, axis=-1, kind="stable")
    order = np.take_along_axis(kept, inner, axis=-1)
    values = np.take_along_axis(candidates, inner, axis=-1)

    threshold = values[..., -1:]
    ambiguous = ((mag == threshold).sum(axis=-1)
                 > (values == threshold).sum(axis=-1))
    if np.any(ambiguous):
        slow_values, slow_order = _topq_rows_sorted(mag[ambiguous], q)
        values[ambiguous] = slow_values
        order[ambiguous] = slow_order
    return values, order


def topq_pool(fmap: FeatureMap, q: int) -> PooledFeatures:
    """Keep the Q largest coefficient magnitudes per scale, with provenance."""
    width = fmap.coefficients.shape[-1]
    if not 1 <= q <= width:
        raise ShapeError(f"Q={q} not in [1, {width}]")
    values, indices = _topq_rows(fmap.coefficients, q)
    return PooledFeatures(values, indices)


@dataclass
class TransformCache:
    """Forward state kept for the backward pass.

    Single-writer: one cache belongs to one forward call and must not be
    shared between concurrent backward calls.
    """

    windows: np.ndarray         # (B, L, M) sliding windows of the segments
    kernels: np.ndarray         # (m, M) tap values used by the forward pass
    std_rows: np.ndarray        # (B, m, L) rows after standardization
    row_std: np.ndarray         # (B, m, 1)
    live: np.ndarray            # (B, m, 1) bool
    mode: str
    pool_idx: np.ndarray        # (B, m, Q)
    pool_sign: np.ndarray       # (B, m, Q)
    params: WaveletParams | None
    kernel_length: int


def _front_forward(segments, kernels, q, mode, params):
    segs = np.asarray(segments, dtype=float)
    if segs.ndim == 1:
        segs = segs[None, :]
    kernel_length = kernels.shape[1]
    if segs.shape[1] < kernel_length:
        raise ShapeError(
            f"segment length {segs.shape[1]} shorter than kernel_length {kernel_length}"
        )
    windows = _segment_windows(segs, kernel_length)
    conv = _valid_convolve_batch(windows, kernels)
    if not 1 <= q <= conv.shape[-1]:
        raise ShapeError(f"Q={q} not in [1, {conv.shape[-1]}]")
    rows, std, live = _standardize_rows(conv, mode)
    values, indices = _topq_rows(rows, q)
    signs = np.sign(np.take_along_axis(rows, indices, axis=-1))
    cache = TransformCache(
        windows=windows, kernels=kernels, std_rows=rows, row_std=std, live=live,
        mode=mode, pool_idx=indices, pool_sign=signs, params=params,
        kernel_length=kernel_length,
    )
    return values, cache


def transform_forward(segments, params: WaveletParams, kernel_length: int,
                      q: int, mode: str = "std"):
    """Convolve, standardize, and pool a batch of segments with cached state.

    segments may be a single 1-D segment or a (B, N) batch.  Returns
    (pooled_values, cache) with pooled_values of shape (B, m, Q).
    """
    kernels = sample_all_kernels(params, kernel_length)
    return _front_forward(segments, kernels, q, mode, params)


def conv_forward(segments, kernels, q: int, mode: str = "std"):
    """Same pipeline with free convolution taps (no wavelet structure)."""
    return _front_forward(segments, np.asarray(kernels, dtype=float), q, mode, None)


def _backward_to_taps(grad_pooled, cache: TransformCache) -> np.ndarray:
    """Chain rule from pooled magnitudes back to kernel tap gradients (m, M)."""
    rows = cache.std_rows
    grad = np.asarray(grad_pooled, dtype=float).reshape(cache.pool_idx.shape)

    # pooling: gradient lands only on winning columns, times sign(|.|)
    g_rows = np.zeros_like(rows)
    np.put_along_axis(g_rows, cache.pool_idx, grad * cache.pool_sign, axis=-1)

    if cache.mode == "std":
        width = rows.shape[-1]
        g_mean = g_rows.mean(axis=-1, keepdims=True)
        gy_mean = np.einsum("...i,...i->...", g_rows, rows)[..., None] / width
        g_conv = rows * gy_mean
        g_conv += g_mean
        np.subtract(g_rows, g_conv, out=g_conv)
        g_conv /= cache.row_std
        g_conv *= cache.live
    elif cache.mode == "var":
        width = rows.shape[-1]
        g_mean = g_rows.mean(axis=-1, keepdims=True)
        gy_mean = np.einsum("...i,...i->...", g_rows, rows)[..., None] / width
        g_conv = (g_rows - g_mean) / (cache.row_std ** 2) - 2.0 * rows * gy_mean
        g_conv *= cache.live
    else:
        g_conv = g_rows

    batch, scales, width = g_conv.shape
    flat_g = g_conv.transpose(0, 2, 1).reshape(-1, scales)     # (B*L, m)
    flat_w = cache.windows.reshape(-1, cache.kernel_length)    # (B*L, M)
    grad_reversed = flat_g.T @ flat_w
    return grad_reversed[:, ::-1]


def transform_backward(grad_pooled, cache: TransformCache | None) -> np.ndarray:
    """Gradient of the pooled output w.r.t. all p + 2n + m wavelet scalars.

    grad_pooled has the pooled shape (B, m, Q) (or (m, Q) for a single
    segment); the return is a flat vector ordered like
    WaveletParams.to_vector().
    """
    if cache is None:
        raise StateError("transform_backward requires the cached forward state")
    if cache.params is None:
        raise StateError("cache was built by conv_forward; it has no wavelet parameters")
    tap_grads = _backward_to_taps(grad_pooled, cache)
    jac = all_kernel_jacobians(cache.params, cache.kernel_length)  # (m, M, p+2n+1)
    shared = np.einsum("kmd,km->d", jac[:, :, :-1], tap_grads)
    per_scale = np.einsum("km,km->k", jac[:, :, -1], tap_grads)
    return np.concatenate([shared, per_scale])


def conv_backward(grad_pooled, cache: TransformCache | None) -> np.ndarray:
    """Tap gradients (m, M) for a free-kernel front end."""
    if cache is None:
        raise StateError("conv_backward requires the cached forward state")
    return _backward_to_taps(grad_pooled, cache)


def write_featuremap_csv(fmap: FeatureMap, path) -> None:
    """One record per coefficient: scale_index,lambda,tau,coefficient."""
    coeff = fmap.coefficients
    with open(path, "w", newline="") as fh:
        fh.write("scale_index,lambda,tau,coefficient\n")
        for k in range(coeff.shape[0]):
            lam = repr(float(fmap.scales[k]))
            for tau in range(coeff.shape[1]):
                fh.write(f"{k},{lam},{tau},{float(coeff[k, tau])!r}\n")
