"""
Brute-force dense implementations used as ground truth for the sparse kernels.

Everything here works on densified tensors or walks columns one by one, sharing no code path
with the production ops beyond the data types.
"""
import itertools
import logging
import math
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from mdrnet.reduce import Reduction, ReductionKind, SDR_NORMS
from mdrnet.sparseconv import ConvKernel
from mdrnet.voxgrid import SparseVoxelTensor, densify

log = logging.getLogger("mdrnet")


def dense_conv3d(dense: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Same-size zero-padded 3D cross-correlation of an (Nx, Ny, Nz, Cin) array, odd kernels only"""
    out = np.zeros(dense.shape[:3] + (k.out_channels,))
    for ci in range(k.in_channels):
        for co in range(k.out_channels):
            out[..., co] += ndimage.correlate(dense[..., ci], k.weights[..., ci, co], mode="constant", cval=0.0)
    return out + k.bias


def submanifold_conv3d_oracle(t: SparseVoxelTensor, k: ConvKernel) -> np.ndarray:
    """Dense convolution of densify(t), read back at the active coordinates, (N, Cout)"""
    c = t.coords
    return dense_conv3d(densify(t), k)[c[:, 0], c[:, 1], c[:, 2]]


def strided_conv3d_oracle(t: SparseVoxelTensor, k: ConvKernel,
                          stride: Sequence[int] = (2, 2, 2)) -> Tuple[np.ndarray, np.ndarray]:
    """
    Dense strided convolution restricted to outputs with an occupied receptive field.

    :return: (M, 3) active output coordinates in (i, j, k) order and their (M, Cout) features
    """
    dense = densify(t)
    occupied = np.zeros(t.geometry.extents, dtype=bool)
    c = t.coords
    occupied[c[:, 0], c[:, 1], c[:, 2]] = True
    extents = t.geometry.extents
    out_ext = tuple(math.ceil(n / s) for n, s in zip(extents, stride))
    pads = [(s - 1) // 2 for s in k.spatial_shape]
    out = np.tile(k.bias, out_ext + (1,))
    hit = np.zeros(out_ext, dtype=bool)
    for tap in itertools.product(*(range(s) for s in k.spatial_shape)):
        idx, valid = [], []
        for axis in range(3):
            p = stride[axis] * np.arange(out_ext[axis]) + tap[axis] - pads[axis]
            valid.append((p >= 0) & (p < extents[axis]))
            idx.append(np.clip(p, 0, extents[axis] - 1))
        inside = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
        window = np.ix_(*idx)
        out += (dense[window] * inside[..., None]) @ k.weights[tap]
        hit |= occupied[window] & inside
    coords = np.argwhere(hit)
    return coords, out[hit]


def conv2d_oracle(values: np.ndarray, k: ConvKernel, stride: int = 1, padding="same") -> np.ndarray:
    """Direct loop over output pixels, taps and channels"""
    kx, ky = k.spatial_shape
    if padding == "same":
        px, py = (kx - 1) // 2, (ky - 1) // 2
    else:
        px, py = (padding, padding) if isinstance(padding, int) else tuple(padding)
    nx, ny, cin = values.shape
    ho = (nx + 2 * px - kx) // stride + 1
    wo = (ny + 2 * py - ky) // stride + 1
    out = np.zeros((ho, wo, k.out_channels))
    for oi in range(ho):
        for oj in range(wo):
            for co in range(k.out_channels):
                acc = k.bias[co]
                for a in range(kx):
                    for b in range(ky):
                        ii = oi * stride + a - px
                        jj = oj * stride + b - py
                        if 0 <= ii < nx and 0 <= jj < ny:
                            for ci in range(cin):
                                acc += values[ii, jj, ci] * k.weights[a, b, ci, co]
                out[oi, oj, co] = acc
    return out


def _column_weights_oracle(logits: np.ndarray, norm: str) -> np.ndarray:
    if norm == "softmax":
        e = np.exp(logits - logits.max())
        return e / e.sum()
    if norm == "sigmoid":
        return 1.0 / (1.0 + np.exp(-logits))
    r = np.maximum(logits, 0.0)
    return r / r.sum() if r.sum() > 0 else np.full(logits.size, 1.0 / logits.size)


def reduce_oracle(t: SparseVoxelTensor, reduction: Reduction) -> np.ndarray:
    """
    Weighted column sum evaluated column by column, (Nx, Ny, C') with zeros on vacant columns.
    SDR logits come from the dense 3D convolution.
    """
    kind = reduction.kind
    nx, ny, nz = t.geometry.extents
    k = reduction.kernel
    c_out = k.out_channels if kind in (ReductionKind.FlattenConv, ReductionKind.FullHeightSparseConv) else t.channels
    out = np.zeros((nx, ny, c_out))
    dense = densify(t)
    logit_grid = dense_conv3d(dense, k)[..., 0] if kind.is_sdr else None
    for i in range(nx):
        for j in range(ny):
            entries = t.column(i, j)
            if not entries:
                continue
            ks = np.array([kk for kk, _ in entries])
            x = np.stack([f for _, f in entries])
            if kind == ReductionKind.MeanPool:
                out[i, j] = x.sum(axis=0) / len(ks)
            elif kind == ReductionKind.MaxPool:
                out[i, j] = x.max(axis=0)
            elif kind == ReductionKind.FullHeightSparseConv:
                out[i, j] = k.bias + sum(x[n] @ k.weights[0, 0, kk] for n, kk in enumerate(ks))
            elif kind == ReductionKind.FlattenConv:
                flat = dense[i, j].reshape(-1)
                out[i, j] = flat @ k.weights.reshape(nz * t.channels, -1) + k.bias
            else:
                w = _column_weights_oracle(logit_grid[i, j, ks], SDR_NORMS[kind])
                out[i, j] = w @ x
    return out
