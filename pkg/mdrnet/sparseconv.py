"""
Sparse 3D and dense 2D convolutions with exact reverse-mode gradients.

Every op takes an optional GradTape. When a tape is given the op appends a record holding what its
backward pass needs; ``GradTape.backward`` then walks the records in reverse and returns the
gradients of every kernel and of every leaf input.

Conventions:
    - cross-correlation, no kernel flip
    - weights are laid out spatial_shape + (in_channels, out_channels)
    - zero padding, taps falling outside the grid contribute nothing
    - sparse gradients are (N, C) arrays aligned with ``t.features``, dense ones match ``m.values``

Usage:
    tape = GradTape()
    y = submanifold_conv3d(t, kernel, tape)
    param_grads, input_grads = tape.backward(y, np.ones_like(y.features))
    param_grads[kernel.name].weights, input_grads[t]
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from mdrnet.errors import ShapeError, TapeError
from mdrnet.voxgrid import DenseBevMap, SparseVoxelTensor

log = logging.getLogger("mdrnet")

Value = Union[SparseVoxelTensor, DenseBevMap]


class ConvKernel(object):
    """Learnable convolution weights (spatial_shape + (Cin, Cout)) and bias (Cout,)"""

    def __init__(self, name: str, weights: np.ndarray, bias: Optional[np.ndarray] = None):
        weights = np.array(weights, dtype=np.float64, copy=True)
        if weights.ndim < 3:
            raise ShapeError(f"kernel {name}: weights need spatial dims + (Cin, Cout), got shape {weights.shape}")
        bias = np.zeros(weights.shape[-1]) if bias is None else np.array(bias, dtype=np.float64, copy=True)
        if bias.shape != (weights.shape[-1],):
            raise ShapeError(f"kernel {name}: bias shape {bias.shape} != ({weights.shape[-1]},)")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError(f"kernel {name}: parameters must be finite")
        self.name = name
        self.weights = weights
        self.bias = bias

    def __repr__(self):
        return (f"ConvKernel({self.name!r}, spatial_shape={self.spatial_shape}, "
                f"in_channels={self.in_channels}, out_channels={self.out_channels})")

    @classmethod
    def init(cls, name: str, spatial_shape: Sequence[int], in_channels: int, out_channels: int,
             rng: np.random.Generator) -> "ConvKernel":
        """Uniform in +-sqrt(1 / fan_in), zero bias"""
        spatial_shape = tuple(int(s) for s in spatial_shape)
        fan_in = int(np.prod(spatial_shape)) * in_channels
        bound = math.sqrt(1.0 / fan_in)
        weights = rng.uniform(-bound, bound, size=spatial_shape + (in_channels, out_channels))
        return cls(name, weights)

    @classmethod
    def zeros(cls, name: str, spatial_shape: Sequence[int], in_channels: int, out_channels: int) -> "ConvKernel":
        return cls(name, np.zeros(tuple(spatial_shape) + (in_channels, out_channels)))

    @classmethod
    def identity(cls, name: str, spatial_shape: Sequence[int], channels: int) -> "ConvKernel":
        """Center tap = I, everything else 0"""
        k = cls.zeros(name, spatial_shape, channels, channels)
        center = tuple((s - 1) // 2 for s in k.spatial_shape)
        k.weights[center] = np.eye(channels)
        return k

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return self.weights.shape[:-2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[-2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]

    @property
    def num_parameters(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self, name: Optional[str] = None) -> "ConvKernel":
        return ConvKernel(self.name if name is None else name, self.weights, self.bias)


@dataclass
class KernelGrad:
    weights: np.ndarray
    bias: np.ndarray

    def __add__(self, other: "KernelGrad") -> "KernelGrad":
        return KernelGrad(self.weights + other.weights, self.bias + other.bias)

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.weights), initial=0.0), np.max(np.abs(self.bias), initial=0.0)))


class _Record(NamedTuple):
    op: str
    inputs: Tuple[Value, ...]
    output: Value
    backward: Callable
    kernels: Tuple[ConvKernel, ...]


class InputGrads(object):
    """Gradients of the leaf values of a tape, indexed by the value object itself"""

    def __init__(self):
        self._grads: Dict[int, Tuple[Value, np.ndarray]] = {}

    def _set(self, value: Value, grad: np.ndarray):
        self._grads[id(value)] = (value, grad)

    def __getitem__(self, value: Value) -> np.ndarray:
        try:
            return self._grads[id(value)][1]
        except KeyError:
            raise KeyError(f"{value!r} is not a leaf input of this tape")

    def __contains__(self, value: Value) -> bool:
        return id(value) in self._grads

    def __len__(self):
        return len(self._grads)


class GradTape(object):
    """Record of forward intermediates, consumed by a single backward pass"""

    def __init__(self):
        self._records: List[_Record] = []
        self.consumed = False

    def __len__(self):
        return len(self._records)

    @property
    def ops(self) -> List[str]:
        return [r.op for r in self._records]

    def record(self, op: str, inputs: Sequence[Value], output: Value, backward: Callable,
               kernels: Sequence[ConvKernel] = ()) -> None:
        if self.consumed:
            raise TapeError(f"cannot record {op} on a consumed tape")
        self._records.append(_Record(op, tuple(inputs), output, backward, tuple(kernels)))

    def backward(self, output: Value, upstream) -> Tuple[Dict[str, KernelGrad], InputGrads]:
        """
        Reverse-mode pass from ``output`` seeded with ``upstream`` (array shaped like the output's
        features/values, or a DenseBevMap).

        :return: (param_grads keyed by kernel name, InputGrads for every leaf value)
        """
        if self.consumed:
            raise TapeError("backward already called on this tape, record a new forward")
        self.consumed = True
        upstream = upstream.values if isinstance(upstream, DenseBevMap) else np.asarray(upstream, dtype=np.float64)
        expected = _grad_shape(output)
        if upstream.shape != expected:
            raise ShapeError(f"upstream shape {upstream.shape} != output shape {expected}")

        param_grads: Dict[str, KernelGrad] = {}
        for rec in self._records:
            for k in rec.kernels:
                if k.name not in param_grads:
                    param_grads[k.name] = KernelGrad(np.zeros_like(k.weights), np.zeros_like(k.bias))

        grads: Dict[int, np.ndarray] = {id(output): upstream.copy()}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            input_grads, kernel_grads = rec.backward(g)
            for value, gi in zip(rec.inputs, input_grads):
                if gi is None:
                    continue
                key = id(value)
                grads[key] = grads[key] + gi if key in grads else gi
            for name, kg in kernel_grads.items():
                param_grads[name] = param_grads[name] + kg

        produced = {id(r.output) for r in self._records}
        leaves = InputGrads()
        for rec in self._records:
            for value in rec.inputs:
                if id(value) not in produced and value not in leaves:
                    leaves._set(value, grads.get(id(value), np.zeros(_grad_shape(value))))
        return param_grads, leaves


def backward(tape: GradTape, output: Value, upstream) -> Tuple[Dict[str, KernelGrad], InputGrads]:
    """Gradients of sum(output * upstream), (param_grads by kernel name, input_grads by leaf value)"""
    return tape.backward(output, upstream)


def _grad_shape(value: Value) -> Tuple[int, ...]:
    if isinstance(value, SparseVoxelTensor):
        return (len(value), value.channels)
    return value.values.shape


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def _taps(spatial_shape: Sequence[int]):
    """(tap index, offset) pairs in C order, offsets relative to the kernel center (k - 1) // 2"""
    for tap in itertools.product(*(range(k) for k in spatial_shape)):
        yield tap, np.array([t - (k - 1) // 2 for t, k in zip(tap, spatial_shape)], dtype=np.int64)


def _check_sparse_kernel(t: SparseVoxelTensor, k: ConvKernel, op: str):
    if len(k.spatial_shape) != 3:
        raise ShapeError(f"{op}: kernel {k.name} is not 3D, spatial shape {k.spatial_shape}")
    if k.in_channels != t.channels:
        raise ShapeError(f"{op}: kernel {k.name} expects {k.in_channels} channels, tensor has {t.channels}")


def submanifold_conv3d(t: SparseVoxelTensor, k: ConvKernel, tape: Optional[GradTape] = None) -> SparseVoxelTensor:
    """
    Submanifold sparse convolution: outputs only at the input's active coordinates, each one
    bias + sum over active neighbors in the kernel window of feature @ weight[tap].
    """
    _check_sparse_kernel(t, k, "submanifold_conv3d")
    if any(s % 2 == 0 for s in k.spatial_shape):
        raise ShapeError(f"submanifold_conv3d: kernel {k.name} must have odd spatial shape, got {k.spatial_shape}")
    geometry = t.geometry
    keys, coords, x = t.keys, t.coords, t.features
    out = np.tile(k.bias, (len(t), 1))
    rules = []
    if len(t):
        for tap, offset in _taps(k.spatial_shape):
            nb = coords + offset
            valid = np.nonzero(geometry.in_bounds(nb))[0]
            nb_keys = geometry.pack(nb[valid])
            pos = np.minimum(np.searchsorted(keys, nb_keys), keys.size - 1)
            found = keys[pos] == nb_keys
            out_idx, in_idx = valid[found], pos[found]
            if out_idx.size:
                out[out_idx] += x[in_idx] @ k.weights[tap]
                rules.append((tap, in_idx, out_idx))
    y = t.with_features(out)

    if tape is not None:
        def _backward(g):
            gx = np.zeros_like(x)
            gw = np.zeros_like(k.weights)
            for tap, in_idx, out_idx in rules:
                go = g[out_idx]
                gx[in_idx] += go @ k.weights[tap].T
                gw[tap] += x[in_idx].T @ go
            return (gx,), {k.name: KernelGrad(gw, _bias_grad(g))}

        tape.record("submanifold_conv3d", (t,), y, _backward, (k,))
    return y


def strided_sparse_conv3d(t: SparseVoxelTensor, k: ConvKernel, stride: Sequence[int] = (2, 2, 2),
                          tape: Optional[GradTape] = None) -> SparseVoxelTensor:
    """
    Downsampling sparse convolution. Output extents are ceil(N / stride); output voxel o reads the
    inputs at stride * o + tap - (kernel - 1) // 2 and is active iff one of them is active.
    """
    _check_sparse_kernel(t, k, "strided_sparse_conv3d")
    stride = np.array([int(s) for s in stride], dtype=np.int64)
    if stride.shape != (3,) or np.any(stride < 1):
        raise ShapeError(f"strided_sparse_conv3d: stride components must be >= 1, got {stride.tolist()}")
    out_geometry = t.geometry.downsample(stride)
    coords, x = t.coords, t.features
    pads = np.array([(s - 1) // 2 for s in k.spatial_shape], dtype=np.int64)
    out_ext = np.array(out_geometry.extents, dtype=np.int64)

    pairs = []
    for tap, _ in _taps(k.spatial_shape):
        q = coords - np.array(tap, dtype=np.int64) + pads
        o = q // stride
        valid = np.nonzero(np.all((q % stride == 0) & (o >= 0) & (o < out_ext), axis=1))[0]
        if valid.size:
            pairs.append((tap, valid, out_geometry.pack(o[valid])))

    out_keys = np.unique(np.concatenate([p[2] for p in pairs])) if pairs else np.zeros(0, dtype=np.int64)
    out = np.tile(k.bias, (out_keys.size, 1))
    rules = []
    for tap, in_idx, o_keys in pairs:
        out_idx = np.searchsorted(out_keys, o_keys)
        out[out_idx] += x[in_idx] @ k.weights[tap]
        rules.append((tap, in_idx, out_idx))
    y = SparseVoxelTensor.from_arrays(out_geometry, out_geometry.unpack(out_keys), out.reshape(-1, k.out_channels),
                                      presorted=True) if out_keys.size else SparseVoxelTensor(out_geometry, k.out_channels)

    if tape is not None:
        def _backward(g):
            gx = np.zeros_like(x)
            gw = np.zeros_like(k.weights)
            for tap, in_idx, out_idx in rules:
                go = g[out_idx]
                gx[in_idx] += go @ k.weights[tap].T
                gw[tap] += x[in_idx].T @ go
            return (gx,), {k.name: KernelGrad(gw, _bias_grad(g))}

        tape.record("strided_sparse_conv3d", (t,), y, _backward, (k,))
    return y


def _resolve_padding(padding, spatial_shape) -> Tuple[int, int]:
    if padding == "same":
        return tuple((s - 1) // 2 for s in spatial_shape)
    if isinstance(padding, int):
        return (padding, padding)
    padding = tuple(int(p) for p in padding)
    if len(padding) != 2 or min(padding) < 0:
        raise ShapeError(f"padding must be 'same', an int or a pair of non-negative ints, got {padding}")
    return padding


def conv2d(m: DenseBevMap, k: ConvKernel, stride: int = 1, padding="same",
           tape: Optional[GradTape] = None) -> DenseBevMap:
    """
    Dense 2D cross-correlation over the BEV plane with zero padding.
    Output size per axis is (N + 2 * pad - k) // stride + 1.
    """
    if len(k.spatial_shape) != 2:
        raise ShapeError(f"conv2d: kernel {k.name} is not 2D, spatial shape {k.spatial_shape}")
    if k.in_channels != m.channels:
        raise ShapeError(f"conv2d: kernel {k.name} expects {k.in_channels} channels, map has {m.channels}")
    if int(stride) < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    s = int(stride)
    kx, ky = k.spatial_shape
    px, py = _resolve_padding(padding, k.spatial_shape)
    nx, ny = m.width, m.height
    ho = (nx + 2 * px - kx) // s + 1
    wo = (ny + 2 * py - ky) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k.spatial_shape} larger than padded map {(nx + 2 * px, ny + 2 * py)}")
    xp = np.pad(m.values, ((px, px), (py, py), (0, 0)))
    out = np.tile(k.bias, (ho, wo, 1))
    for a in range(kx):
        for b in range(ky):
            out += xp[a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] @ k.weights[a, b]
    y = DenseBevMap(out)

    if tape is not None:
        def _backward(g):
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(k.weights)
            for a in range(kx):
                for b in range(ky):
                    window = (slice(a, a + s * (ho - 1) + 1, s), slice(b, b + s * (wo - 1) + 1, s))
                    gxp[window] += g @ k.weights[a, b].T
                    gw[a, b] = np.tensordot(xp[window], g, axes=([0, 1], [0, 1]))
            return (gxp[px:px + nx, py:py + ny],), {k.name: KernelGrad(gw, _bias_grad(g))}

        tape.record("conv2d", (m,), y, _backward, (k,))
    return y


def relu(m: DenseBevMap, tape: Optional[GradTape] = None) -> DenseBevMap:
    y = DenseBevMap(np.maximum(m.values, 0.0))
    if tape is not None:
        # subgradient at 0 is 0
        tape.record("relu", (m,), y, lambda g: ((g * (m.values > 0),), {}))
    return y


def sparse_relu(t: SparseVoxelTensor, tape: Optional[GradTape] = None) -> SparseVoxelTensor:
    y = t.with_features(np.maximum(t.features, 0.0))
    if tape is not None:
        tape.record("sparse_relu", (t,), y, lambda g: ((g * (t.features > 0),), {}))
    return y


def add(a: DenseBevMap, b: DenseBevMap, tape: Optional[GradTape] = None) -> DenseBevMap:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    y = DenseBevMap(a.values + b.values)
    if tape is not None:
        tape.record("add", (a, b), y, lambda g: ((g, g), {}))
    return y


def residual_block2d(m: DenseBevMap, k1: ConvKernel, k2: ConvKernel,
                     tape: Optional[GradTape] = None) -> DenseBevMap:
    """relu(conv(relu(conv(m, k1)), k2) + m) with channel-preserving 3x3 kernels"""
    for k in (k1, k2):
        if k.spatial_shape != (3, 3) or k.in_channels != m.channels or k.out_channels != m.channels:
            raise ShapeError(f"residual_block2d: kernel {k.name} must be 3x3 and map {m.channels} -> "
                             f"{m.channels} channels, got {k.spatial_shape} {k.in_channels} -> {k.out_channels}")
    h = relu(conv2d(m, k1, tape=tape), tape)
    return relu(add(conv2d(h, k2, tape=tape), m, tape), tape)
