"""
Height-axis reductions from a sparse voxel tensor to a dense BEV map.

All kinds are the same weighted column sum y[i, j] = sum over active k of w[i, j, k] * x[i, j, k]:
    - MeanPool: w = 1 / |column|
    - MaxPool: per channel, w = 1 on the first (smallest k) argmax, 0 elsewhere
    - FullHeightSparseConv / FlattenConv: static learned per-k weight matrices and a bias
    - SdrRelu / SdrSigmoid / SdrSoftmax: w from a 3x3x3 submanifold conv estimator (one logit per voxel)
      normalized per column
Vacant columns are zero in the output.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from mdrnet.errors import ShapeError
from mdrnet.sparseconv import ConvKernel, GradTape, InputGrads, KernelGrad, backward, submanifold_conv3d
from mdrnet.voxgrid import DenseBevMap, GridGeometry, SparseVoxelTensor

log = logging.getLogger("mdrnet")


class ReductionKind(Enum):
    MeanPool = "MeanPool"
    MaxPool = "MaxPool"
    FlattenConv = "FlattenConv"
    FullHeightSparseConv = "FullHeightSparseConv"
    SdrRelu = "SdrRelu"
    SdrSigmoid = "SdrSigmoid"
    SdrSoftmax = "SdrSoftmax"

    @property
    def is_sdr(self) -> bool:
        return self in SDR_NORMS

    @property
    def needs_kernel(self) -> bool:
        return self not in (ReductionKind.MeanPool, ReductionKind.MaxPool)


SDR_NORMS = {
    ReductionKind.SdrRelu: "relu",
    ReductionKind.SdrSigmoid: "sigmoid",
    ReductionKind.SdrSoftmax: "softmax",
}


@dataclass
class Reduction:
    """A reduction kind and, for the learned kinds, its kernel"""

    kind: ReductionKind
    kernel: Optional[ConvKernel] = None

    def __post_init__(self):
        if self.kind.needs_kernel and self.kernel is None:
            raise ShapeError(f"{self.kind.value} needs a kernel")

    @classmethod
    def create(cls, kind: ReductionKind, channels: int, z_extent: int, rng: np.random.Generator,
               name: str = "reduce") -> "Reduction":
        """Reduction with a freshly initialized kernel for a tensor of the given channels and height"""
        if kind.is_sdr:
            return cls(kind, ConvKernel.init(f"{name}.estimator", (3, 3, 3), channels, 1, rng))
        if kind.needs_kernel:
            return cls(kind, ConvKernel.init(f"{name}.full_height", (1, 1, z_extent), channels, channels, rng))
        return cls(kind)


@dataclass
class ReductionWeights:
    """
    Per-voxel weights of a reduction, aligned with the source tensor's sorted active set.
    ``weights`` is (N,) for scalar kinds and an (N, C) 0/1 mask for MaxPool,
    ``logits`` holds the SDR estimator output before normalization.
    """

    kind: ReductionKind
    geometry: GridGeometry
    keys: np.ndarray
    weights: np.ndarray
    logits: Optional[np.ndarray] = None

    def __len__(self):
        return int(self.keys.size)

    @property
    def coords(self) -> np.ndarray:
        return self.geometry.unpack(self.keys)

    def get(self, coord) -> Optional[np.ndarray]:
        key = self.geometry.pack(np.asarray(coord))
        n = np.searchsorted(self.keys, key)
        if n < self.keys.size and self.keys[n] == key:
            return np.atleast_1d(self.weights[n]).copy()
        return None

    def scalar_weights(self) -> np.ndarray:
        """One number per voxel, MaxPool masks give the fraction of channels won by the voxel"""
        if self.weights.ndim == 2:
            return self.weights.mean(axis=1)
        return self.weights

    def column_sums(self) -> Tuple[np.ndarray, np.ndarray]:
        """(M, 2) occupied column indices and the weight sums over each of them"""
        if not self.keys.size:
            return np.zeros((0, 2), dtype=np.int64), np.zeros((0,) + self.weights.shape[1:])
        cols = _Columns(self.geometry, self.keys)
        return np.column_stack([cols.bev_i, cols.bev_j]), np.add.reduceat(self.weights, cols.starts, axis=0)

    def elevated_mass(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Scalar weight held above the lowest active voxel of each occupied column.

        :return: (M, 2) column indices, (M,) voxel counts, (M,) weight mass above the lowest voxel
        """
        if not self.keys.size:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
        cols = _Columns(self.geometry, self.keys)
        w = self.scalar_weights()
        # keys sort k ascending inside a column, the run start is the lowest voxel
        mass = np.add.reduceat(w, cols.starts) - w[cols.starts]
        return np.column_stack([cols.bev_i, cols.bev_j]), cols.counts, mass

    def to_lines(self) -> List[Tuple[int, int, int, float]]:
        return [(int(i), int(j), int(k), float(w)) for (i, j, k), w in zip(self.coords, self.scalar_weights())]


class _Columns(object):
    """Contiguous (i, j) runs of a sorted key array"""

    def __init__(self, geometry: GridGeometry, keys: np.ndarray):
        _, ny, nz = geometry.extents
        col_ids = keys // nz
        uniq, self.starts, self.counts = np.unique(col_ids, return_index=True, return_counts=True)
        self.inverse = np.repeat(np.arange(uniq.size), self.counts)
        self.bev_i = uniq // ny
        self.bev_j = uniq % ny
        self.k = keys % nz

    def sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.starts, axis=0)

    def scatter(self, geometry: GridGeometry, per_column: np.ndarray) -> np.ndarray:
        nx, ny, _ = geometry.extents
        out = np.zeros((nx, ny, per_column.shape[1]))
        out[self.bev_i, self.bev_j] = per_column
        return out

    def gather(self, g: np.ndarray) -> np.ndarray:
        """Upstream gradient of each voxel's column, (N, C)"""
        return g[self.bev_i, self.bev_j][self.inverse]


def _empty_output(t: SparseVoxelTensor, channels: int) -> DenseBevMap:
    nx, ny, _ = t.geometry.extents
    return DenseBevMap.zeros(nx, ny, channels)


def _weighted_column_sum(t: SparseVoxelTensor, cols: _Columns, w: np.ndarray) -> np.ndarray:
    """Shared by every scalar-weight kind so equal weights give bitwise equal outputs"""
    return cols.scatter(t.geometry, cols.sum(t.features * w[:, None]))


def mean_weights(t: SparseVoxelTensor, i: int, j: int) -> np.ndarray:
    """Uniform 1 / |column| for each active k of column (i, j), empty for a vacant column"""
    n = len(t.column(i, j))
    return np.full(n, 1.0 / n) if n else np.zeros(0)


def max_weights(t: SparseVoxelTensor, i: int, j: int) -> np.ndarray:
    """(|column|, C) mask, 1 on the first argmax over k of each channel"""
    entries = t.column(i, j)
    if not entries:
        return np.zeros((0, t.channels))
    x = np.stack([f for _, f in entries])
    mask = np.zeros_like(x)
    mask[np.argmax(x, axis=0), np.arange(t.channels)] = 1.0
    return mask


def _mean_pool(t: SparseVoxelTensor, tape: Optional[GradTape]):
    cols = _Columns(t.geometry, t.keys)
    w = (1.0 / cols.counts)[cols.inverse]
    y = DenseBevMap(_weighted_column_sum(t, cols, w))
    if tape is not None:
        tape.record("mean_pool", (t,), y, lambda g: ((cols.gather(g) * w[:, None],), {}))
    return y, ReductionWeights(ReductionKind.MeanPool, t.geometry, t.keys, w)


def _max_pool(t: SparseVoxelTensor, tape: Optional[GradTape]):
    cols = _Columns(t.geometry, t.keys)
    x = t.features
    n, c = x.shape
    col_max = np.maximum.reduceat(x, cols.starts, axis=0)
    # smallest row index hitting the max, rows are ascending in k within a column
    rows = np.where(x == col_max[cols.inverse], np.arange(n)[:, None], n)
    argmax = np.minimum.reduceat(rows, cols.starts, axis=0)
    channels = np.broadcast_to(np.arange(c), argmax.shape)
    mask = np.zeros_like(x)
    mask[argmax, channels] = 1.0
    y = DenseBevMap(cols.scatter(t.geometry, x[argmax, channels]))

    if tape is not None:
        def _backward(g):
            gx = np.zeros_like(x)
            gx[argmax, channels] = g[cols.bev_i, cols.bev_j]
            return (gx,), {}

        tape.record("max_pool", (t,), y, _backward)
    return y, ReductionWeights(ReductionKind.MaxPool, t.geometry, t.keys, mask)


def _check_full_height_kernel(t: SparseVoxelTensor, k: ConvKernel, op: str):
    nz = t.geometry.extents[2]
    if k.spatial_shape != (1, 1, nz):
        raise ShapeError(f"{op}: kernel {k.name} must have spatial shape (1, 1, {nz}), got {k.spatial_shape}")
    if k.in_channels != t.channels:
        raise ShapeError(f"{op}: kernel {k.name} expects {k.in_channels} channels, tensor has {t.channels}")


def full_height_conv_reduce(t: SparseVoxelTensor, k: ConvKernel, tape: Optional[GradTape] = None) -> DenseBevMap:
    """
    Sparse convolution whose kernel spans the whole height: y[i, j] = bias + sum over active k of
    x[i, j, k] @ W[k] on occupied columns, 0 on vacant ones.
    """
    _check_full_height_kernel(t, k, "full_height_conv_reduce")
    if not len(t):
        y = _empty_output(t, k.out_channels)
        if tape is not None:
            tape.record("full_height_conv_reduce", (t,), y,
                        lambda g: ((np.zeros((0, t.channels)),), {}), (k,))
        return y
    w3 = k.weights[0, 0]
    x = t.features
    cols = _Columns(t.geometry, t.keys)
    slices = [(kz, np.nonzero(cols.k == kz)[0]) for kz in np.unique(cols.k)]
    contrib = np.zeros((x.shape[0], k.out_channels))
    for kz, sel in slices:
        contrib[sel] = x[sel] @ w3[kz]
    y = DenseBevMap(cols.scatter(t.geometry, cols.sum(contrib) + k.bias))

    if tape is not None:
        def _backward(g):
            gcol = cols.gather(g)
            gx = np.zeros_like(x)
            gw = np.zeros_like(k.weights)
            for kz, sel in slices:
                gx[sel] = gcol[sel] @ w3[kz].T
                gw[0, 0, kz] = x[sel].T @ gcol[sel]
            gb = g[cols.bev_i, cols.bev_j].sum(axis=0)
            return (gx,), {k.name: KernelGrad(gw, gb)}

        tape.record("full_height_conv_reduce", (t,), y, _backward, (k,))
    return y


def flatten_conv_reduce(t: SparseVoxelTensor, k: ConvKernel, tape: Optional[GradTape] = None) -> DenseBevMap:
    """
    Dense path of the full-height reduction: densify, flatten (Nz, C) per column into Nz * C
    channels, apply a 1x1 conv, keep occupied columns.
    """
    _check_full_height_kernel(t, k, "flatten_conv_reduce")
    nx, ny, nz = t.geometry.extents
    dense = t.densify().reshape(nx, ny, nz * t.channels)
    w = k.weights.reshape(nz * k.in_channels, k.out_channels)
    occupied = np.zeros((nx, ny, 1))
    occupied[t.coords[:, 0], t.coords[:, 1]] = 1.0
    y = DenseBevMap((dense @ w + k.bias) * occupied)

    if tape is not None:
        def _backward(g):
            gm = g * occupied
            gdense = (gm @ w.T).reshape(nx, ny, nz, t.channels)
            c = t.coords
            gx = gdense[c[:, 0], c[:, 1], c[:, 2]]
            gw = np.tensordot(dense, gm, axes=([0, 1], [0, 1])).reshape(k.weights.shape)
            return (gx,), {k.name: KernelGrad(gw, gm.reshape(-1, gm.shape[-1]).sum(axis=0))}

        tape.record("flatten_conv_reduce", (t,), y, _backward, (k,))
    return y


def normalize_logits(logits: np.ndarray, cols: _Columns, norm: str) -> np.ndarray:
    """Per-column weights from per-voxel logits"""
    if norm == "softmax":
        shifted = logits - np.maximum.reduceat(logits, cols.starts)[cols.inverse]
        e = np.exp(shifted)
        return e / cols.sum(e)[cols.inverse]
    if norm == "sigmoid":
        return expit(logits)
    if norm == "relu":
        r = np.maximum(logits, 0.0)
        s = cols.sum(r)
        fallback = s == 0
        if np.any(fallback):
            log.debug(f"sdr relu: {int(np.count_nonzero(fallback))} columns without positive logits, using uniform weights")
        safe = np.where(fallback, 1.0, s)
        return np.where(fallback[cols.inverse], 1.0 / cols.counts[cols.inverse], r / safe[cols.inverse])
    raise ValueError(f"unknown normalization {norm!r}, expected relu, sigmoid or softmax")


def _normalize_backward(logits: np.ndarray, w: np.ndarray, dw: np.ndarray, cols: _Columns, norm: str) -> np.ndarray:
    if norm == "softmax":
        return w * (dw - cols.sum(w * dw)[cols.inverse])
    if norm == "sigmoid":
        return dw * w * (1.0 - w)
    s = cols.sum(np.maximum(logits, 0.0))
    live = (s > 0)[cols.inverse] & (logits > 0)
    safe = np.where(s > 0, s, 1.0)[cols.inverse]
    return np.where(live, (dw - cols.sum(w * dw)[cols.inverse]) / safe, 0.0)


def sdr(t: SparseVoxelTensor, estimator: ConvKernel, norm: str = "softmax",
        tape: Optional[GradTape] = None) -> Tuple[DenseBevMap, ReductionWeights]:
    """
    Spatial-aware reduction: logits from a submanifold conv over each voxel's 3x3x3 neighborhood,
    normalized per column, then the weighted column sum.

    :param t: input tensor (C channels)
    :param estimator: 3x3x3 kernel C -> 1
    :param norm: "relu" (positive part over its column sum, uniform if the column has none),
        "sigmoid" (independent gates, no column normalization) or "softmax"
    :param tape: optional GradTape
    :return: (BEV map with C channels, ReductionWeights with logits)
    """
    kind = {v: k for k, v in SDR_NORMS.items()}.get(norm)
    if kind is None:
        raise ValueError(f"unknown normalization {norm!r}, expected relu, sigmoid or softmax")
    if estimator.out_channels != 1:
        raise ShapeError(f"sdr: estimator {estimator.name} must output 1 channel, got {estimator.out_channels}")
    logit_t = submanifold_conv3d(t, estimator, tape)
    if not len(t):
        y = _empty_output(t, t.channels)
        return y, ReductionWeights(kind, t.geometry, t.keys, np.zeros(0), np.zeros(0))
    logits = logit_t.features[:, 0]
    cols = _Columns(t.geometry, t.keys)
    w = normalize_logits(logits, cols, norm)
    x = t.features
    y = DenseBevMap(_weighted_column_sum(t, cols, w))

    if tape is not None:
        def _backward(g):
            gcol = cols.gather(g)
            dw = np.sum(gcol * x, axis=1)
            dl = _normalize_backward(logits, w, dw, cols, norm)
            return (gcol * w[:, None], dl[:, None]), {}

        tape.record(f"sdr_{norm}", (t, logit_t), y, _backward)
    return y, ReductionWeights(kind, t.geometry, t.keys, w, logits)


def reduce(t: SparseVoxelTensor, kind: Union[Reduction, ReductionKind],
           tape: Optional[GradTape] = None) -> Tuple[DenseBevMap, Optional[ReductionWeights]]:
    """
    Collapse the height axis of t into an (Nx, Ny, C') map.

    :param t: input tensor
    :param kind: a Reduction, or a bare ReductionKind for the parameter-free pooling kinds
    :param tape: optional GradTape
    :return: (map, weights) where weights is None for the static conv kinds
    """
    reduction = kind if isinstance(kind, Reduction) else Reduction(kind)
    kind = reduction.kind
    if not len(t) and kind in (ReductionKind.MeanPool, ReductionKind.MaxPool):
        y = _empty_output(t, t.channels)
        if tape is not None:
            tape.record("empty_pool", (t,), y, lambda g: ((np.zeros((0, t.channels)),), {}))
        shape = (0, t.channels) if kind == ReductionKind.MaxPool else (0,)
        return y, ReductionWeights(kind, t.geometry, t.keys, np.zeros(shape))
    if kind == ReductionKind.MeanPool:
        return _mean_pool(t, tape)
    if kind == ReductionKind.MaxPool:
        return _max_pool(t, tape)
    if kind == ReductionKind.FullHeightSparseConv:
        return full_height_conv_reduce(t, reduction.kernel, tape), None
    if kind == ReductionKind.FlattenConv:
        return flatten_conv_reduce(t, reduction.kernel, tape), None
    return sdr(t, reduction.kernel, SDR_NORMS[kind], tape)


def reduce_backward(tape: GradTape, output: DenseBevMap, upstream) -> Tuple[InputGrads, dict]:
    """Backward through a recorded reduction, returns (input_grads, param_grads)"""
    param_grads, input_grads = backward(tape, output, upstream)
    return input_grads, param_grads
