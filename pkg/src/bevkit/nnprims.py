"""Framework-free numeric primitives for the BEV pipeline.

Dense tensors are plain float64 numpy arrays in row-major layout. All
operations here are pure, single-threaded, and deterministic: calling them
from many threads is safe, and there is no internal parallelism that could
reassociate floating-point sums.

Canonical layouts used throughout the package:
    image features      (C, H, W)
    depth distribution  (C_D, H, W)
    lifted features     (C_ctx, C_D, H, W)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

TNSR_MAGIC = b"TNSR"


def as_tensor(data) -> np.ndarray:
    """Coerce input to a float64 array and verify it is finite."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class DepthBinSpec:
    """Uniform discretization of the depth axis into n_bins bins."""

    d_min: float
    d_max: float
    n_bins: int

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")
        if self.d_max <= self.d_min:
            raise ValueError("d_max must exceed d_min")
        if self.n_bins < 2:
            raise ValueError("need at least 2 depth bins")

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.n_bins

    def centers(self) -> np.ndarray:
        """Bin-center depths, strictly increasing, inside [d_min, d_max]."""
        return self.d_min + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def index_of(self, depth) -> np.ndarray:
        """Nearest-center bin index; out-of-range depths clamp to end bins."""
        idx = np.floor((np.asarray(depth, dtype=np.float64) - self.d_min) / self.bin_width)
        return np.clip(idx, 0, self.n_bins - 1).astype(np.int64)


def softmax_over_depth(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax along axis 0 of a (C_D, H, W) logit map.

    Max-subtracted for stability; every pixel's bin probabilities sum to 1.
    """
    logits = as_tensor(logits)
    if logits.ndim != 3:
        raise ValueError(f"expected (C_D, H, W) logits, got shape {logits.shape}")
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def lift_outer_product(context: np.ndarray, p_depth: np.ndarray) -> np.ndarray:
    """Expand per-pixel context across the depth distribution.

    out[i, l, j, k] = context[i, j, k] * p_depth[l, j, k], so summing the
    result over depth bins recovers the context when p_depth is normalized.
    """
    context = as_tensor(context)
    p_depth = as_tensor(p_depth)
    if context.ndim != 3 or p_depth.ndim != 3:
        raise ValueError("context and depth distribution must be rank-3")
    if context.shape[1:] != p_depth.shape[1:]:
        raise ValueError(
            f"spatial shape mismatch: context {context.shape[1:]} vs depth {p_depth.shape[1:]}"
        )
    return context[:, None, :, :] * p_depth[None, :, :, :]


def se_excite(features: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """Scale each channel of a (C, H, W) map by its gate value."""
    features = as_tensor(features)
    gates = as_tensor(gates)
    if gates.ndim != 1 or features.ndim != 3 or gates.shape[0] != features.shape[0]:
        raise ValueError(
            f"gate length {gates.shape} does not match feature channels {features.shape}"
        )
    return gates[:, None, None] * features


def conv_pointwise(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """1x1 convolution: per-pixel matrix-vector product plus bias.

    x: (C_in, H, W), kernel: (C_out, C_in), bias: (C_out,).
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    bias = as_tensor(bias)
    if x.ndim != 3 or kernel.ndim != 2 or bias.ndim != 1:
        raise ValueError("conv_pointwise expects (C_in,H,W), (C_out,C_in), (C_out,)")
    if kernel.shape[1] != x.shape[0] or kernel.shape[0] != bias.shape[0]:
        raise ValueError(
            f"shape mismatch: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}"
        )
    return np.einsum("oi,ihw->ohw", kernel, x) + bias[:, None, None]


def fold_depth_view(x: np.ndarray) -> np.ndarray:
    """View (C_F, C_D, H, W) as (C_F*H, C_D, W) for depth-axis filtering."""
    c_f, c_d, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(c_f * h, c_d, w)


def unfold_depth_view(y: np.ndarray, c_f: int, h: int) -> np.ndarray:
    """Inverse of fold_depth_view."""
    _, c_d, w = y.shape
    return y.reshape(c_f, h, c_d, w).transpose(0, 2, 1, 3)


def depth_refine(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Filter lifted features along the (depth-bin, column) plane.

    The (C_F, C_D, H, W) input is viewed as (C_F*H) independent (C_D, W)
    slices; each is cross-correlated with one shared 3x3 kernel under zero
    padding and the result is viewed back. kernel[1, 1] is the center tap,
    so a one-hot center kernel is the identity.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 4:
        raise ValueError(f"expected (C_F, C_D, H, W), got shape {x.shape}")
    if kernel.shape != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kernel.shape}")
    c_f, c_d, h, w = x.shape
    if c_d < 3:
        raise ValueError(f"need at least 3 depth bins to filter, got {c_d}")

    slices = fold_depth_view(x)
    padded = np.zeros((slices.shape[0], c_d + 2, w + 2))
    padded[:, 1:-1, 1:-1] = slices
    out = np.zeros_like(slices)
    for dj in range(3):
        for dk in range(3):
            out += kernel[dj, dk] * padded[:, dj : dj + c_d, dk : dk + w]
    return unfold_depth_view(out, c_f, h)


def finite_diff_jacobian(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector-to-vector function.

    J[i, j] = (f(x + h*e_j) - f(x - h*e_j))[i] / (2h). The function is the
    independent oracle used to verify analytic derivatives elsewhere.
    """
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        f_plus = np.asarray(f(x + e), dtype=np.float64)
        f_minus = np.asarray(f(x - e), dtype=np.float64)
        if not np.all(np.isfinite(f_plus)) or not np.all(np.isfinite(f_minus)):
            raise ValueError(f"non-finite function output while perturbing input {j}")
        cols.append((f_plus - f_minus).ravel() / (2.0 * h))
    return np.stack(cols, axis=1)


def write_tensor(path, arr: np.ndarray) -> None:
    """Serialize a float64 array: magic, u32 rank, u32 extents, f64 payload.

    Everything little-endian.
    """
    arr = as_tensor(arr)
    with open(path, "wb") as fh:
        fh.write(TNSR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TNSR_MAGIC:
            raise ValueError(f"bad tensor magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return as_tensor(arr)
