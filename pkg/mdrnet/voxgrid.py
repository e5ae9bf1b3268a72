"""
Sparse voxel tensors over a bounded 3D integer grid, and the dense bird's eye view map.

A SparseVoxelTensor maps integer coordinates (i, j, k) to feature vectors of C float64 values.
Entries are keyed by the packed coordinate ``(i * Ny + j) * Nz + k``, so sorting the keys gives the
lexicographic (i, j, k) order used by every iteration and every kernel in the package, and all
voxels of one (i, j) column are contiguous.

Usage:
    geom = GridGeometry(origin=(0, 0, 0), voxel_size=(0.1, 0.1, 0.2), extents=(4, 4, 4))
    t = new_sparse(geom, channels=2)
    set_voxel(t, (1, 2, 3), [1.0, 2.0])
    column(t, 1, 2)
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from mdrnet.errors import BoundsError, GeometryError, ShapeError

log = logging.getLogger("mdrnet")

Coord = Tuple[int, int, int]


@dataclass(frozen=True)
class GridGeometry:
    """Origin (m), voxel size (m per cell) and extents (cell counts) of a 3D grid"""

    origin: Tuple[float, float, float]
    voxel_size: Tuple[float, float, float]
    extents: Tuple[int, int, int]

    def __post_init__(self):
        origin = tuple(float(x) for x in self.origin)
        voxel_size = tuple(float(x) for x in self.voxel_size)
        if len(origin) != 3 or len(voxel_size) != 3 or len(self.extents) != 3:
            raise GeometryError("origin, voxel_size and extents must be 3-vectors")
        if not all(np.isfinite(origin)):
            raise GeometryError(f"origin must be finite, got {origin}")
        if not all(np.isfinite(voxel_size)) or min(voxel_size) <= 0:
            raise GeometryError(f"voxel_size components must be strictly positive, got {voxel_size}")
        if any(int(n) != n for n in self.extents) or min(self.extents) <= 0:
            raise GeometryError(f"extents must be strictly positive integers, got {self.extents}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", voxel_size)
        object.__setattr__(self, "extents", tuple(int(n) for n in self.extents))

    @classmethod
    def from_range(cls, range_min: Sequence[float], range_max: Sequence[float],
                   voxel_size: Sequence[float]) -> "GridGeometry":
        """Build the geometry covering [range_min, range_max) with the given voxel size,
        N = round((max - min) / size) per axis"""
        range_min = np.asarray(range_min, dtype=np.float64)
        range_max = np.asarray(range_max, dtype=np.float64)
        size = np.asarray(voxel_size, dtype=np.float64)
        if range_min.shape != (3,) or range_max.shape != (3,) or size.shape != (3,):
            raise GeometryError("range_min, range_max and voxel_size must be 3-vectors")
        if np.any(range_max <= range_min):
            raise GeometryError(f"range_max {range_max.tolist()} must exceed range_min {range_min.tolist()}")
        if np.any(size <= 0):
            raise GeometryError(f"voxel_size components must be strictly positive, got {size.tolist()}")
        extents = np.round((range_max - range_min) / size).astype(np.int64)
        return cls(tuple(range_min), tuple(size), tuple(int(n) for n in extents))

    @property
    def num_cells(self) -> int:
        nx, ny, nz = self.extents
        return nx * ny * nz

    @property
    def bev_shape(self) -> Tuple[int, int]:
        return self.extents[0], self.extents[1]

    @property
    def range_max(self) -> Tuple[float, float, float]:
        return tuple(o + s * n for o, s, n in zip(self.origin, self.voxel_size, self.extents))

    def downsample(self, stride: Sequence[int]) -> "GridGeometry":
        """Geometry of a strided convolution output: ceil(N / s) cells of s times the size"""
        stride = tuple(int(s) for s in stride)
        if len(stride) != 3 or min(stride) < 1:
            raise GeometryError(f"stride components must be >= 1, got {stride}")
        return GridGeometry(
            self.origin,
            tuple(v * s for v, s in zip(self.voxel_size, stride)),
            tuple(math.ceil(n / s) for n, s in zip(self.extents, stride)),
        )

    def in_bounds(self, coords: np.ndarray) -> np.ndarray:
        """Boolean mask of the rows of an (N, 3) coordinate array lying inside the extents"""
        coords = np.asarray(coords)
        return np.all((coords >= 0) & (coords < np.asarray(self.extents)), axis=-1)

    def pack(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64)
        _, ny, nz = self.extents
        return (coords[..., 0] * ny + coords[..., 1]) * nz + coords[..., 2]

    def unpack(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        _, ny, nz = self.extents
        k = keys % nz
        j = (keys // nz) % ny
        i = keys // (nz * ny)
        return np.stack([i, j, k], axis=-1)


class SparseVoxelTensor(object):
    """
    Coordinate-indexed set of C-channel float64 feature vectors over a GridGeometry.

    Writes go to a dict keyed by the packed coordinate. Kernels read the sorted ``keys``,
    ``coords`` and ``features`` arrays which are materialized once after the last write.
    """

    def __init__(self, geometry: GridGeometry, channels: int):
        if not isinstance(geometry, GridGeometry):
            raise GeometryError(f"expected a GridGeometry, got {type(geometry).__name__}")
        if int(channels) != channels or channels < 1:
            raise GeometryError(f"channels must be a positive integer, got {channels}")
        self.geometry = geometry
        self.channels = int(channels)
        self._entries: Optional[Dict[int, np.ndarray]] = {}
        self._keys: Optional[np.ndarray] = None
        self._features: Optional[np.ndarray] = None

    def __repr__(self):
        return (f"SparseVoxelTensor(extents={self.geometry.extents}, channels={self.channels}, "
                f"active={len(self)})")

    @classmethod
    def from_arrays(cls, geometry: GridGeometry, coords: np.ndarray, features: np.ndarray,
                    presorted: bool = False) -> "SparseVoxelTensor":
        """Build a tensor from (N, 3) coordinates and (N, C) features. Coordinates must be unique."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = np.array(features, dtype=np.float64, copy=True)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ShapeError(f"features shape {features.shape} does not match {coords.shape[0]} coordinates")
        if features.shape[1] < 1:
            raise ShapeError("features must have at least one channel")
        if not np.all(geometry.in_bounds(coords)):
            bad = coords[~geometry.in_bounds(coords)][0]
            raise BoundsError(f"coordinate {tuple(bad)} outside extents {geometry.extents}")
        keys = geometry.pack(coords)
        if not presorted:
            order = np.argsort(keys, kind="stable")
            keys = keys[order]
            features = features[order]
        if keys.size > 1 and np.any(np.diff(keys) <= 0):
            raise ShapeError("duplicate coordinates in from_arrays")
        out = cls(geometry, features.shape[1])
        out._entries = None
        out._keys = keys
        out._features = features
        return out

    def _ensure_dict(self) -> Dict[int, np.ndarray]:
        if self._entries is None:
            self._entries = {int(k): f for k, f in zip(self._keys, self._features)}
        return self._entries

    def _ensure_arrays(self):
        if self._keys is None:
            keys = np.array(sorted(self._entries), dtype=np.int64)
            if keys.size:
                features = np.stack([self._entries[int(k)] for k in keys])
            else:
                features = np.zeros((0, self.channels), dtype=np.float64)
            self._keys = keys
            self._features = features

    def _check_coord(self, coord: Sequence[int]) -> Coord:
        coord = tuple(int(c) for c in coord)
        if len(coord) != 3:
            raise BoundsError(f"coordinate must have 3 components, got {coord}")
        if not self.geometry.in_bounds(np.array(coord)):
            raise BoundsError(f"coordinate {coord} outside extents {self.geometry.extents}")
        return coord

    def set_voxel(self, coord: Sequence[int], feat: Sequence[float]) -> "SparseVoxelTensor":
        """Write (overwrite) the feature at coord"""
        coord = self._check_coord(coord)
        feat = np.array(feat, dtype=np.float64, copy=True).reshape(-1)
        if feat.shape[0] != self.channels:
            raise ShapeError(f"feature length {feat.shape[0]} != channels {self.channels}")
        entries = self._ensure_dict()
        entries[int(self.geometry.pack(np.array(coord)))] = feat
        self._keys = None
        self._features = None
        return self

    def get_voxel(self, coord: Sequence[int]) -> Optional[np.ndarray]:
        """Feature at coord, or None if the voxel is not active"""
        coord = self._check_coord(coord)
        feat = self._ensure_dict().get(int(self.geometry.pack(np.array(coord))))
        return None if feat is None else feat.copy()

    @property
    def keys(self) -> np.ndarray:
        self._ensure_arrays()
        return self._keys

    @property
    def coords(self) -> np.ndarray:
        return self.geometry.unpack(self.keys)

    @property
    def features(self) -> np.ndarray:
        self._ensure_arrays()
        return self._features

    def __len__(self) -> int:
        if self._keys is not None:
            return int(self._keys.size)
        return len(self._entries)

    def __iter__(self) -> Iterator[Tuple[Coord, np.ndarray]]:
        for c, f in zip(self.coords, self.features):
            yield (int(c[0]), int(c[1]), int(c[2])), f

    def with_features(self, features: np.ndarray) -> "SparseVoxelTensor":
        """Same active set, new (N, C') features"""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(self):
            raise ShapeError(f"features shape {features.shape} does not match {len(self)} active voxels")
        out = SparseVoxelTensor(self.geometry, features.shape[1])
        out._entries = None
        out._keys = self.keys
        out._features = features
        return out

    def column(self, i: int, j: int) -> List[Tuple[int, np.ndarray]]:
        return column(self, i, j)

    def densify(self) -> np.ndarray:
        return densify(self)


@dataclass
class DenseBevMap:
    """Dense (Nx, Ny, C) feature map over the BEV plane"""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"DenseBevMap values must be (Nx, Ny, C), got shape {self.values.shape}")

    @classmethod
    def zeros(cls, width: int, height: int, channels: int) -> "DenseBevMap":
        return cls(np.zeros((width, height, channels), dtype=np.float64))

    @property
    def width(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def new_sparse(geometry: GridGeometry, channels: int) -> SparseVoxelTensor:
    """Empty tensor over geometry with the given channel count"""
    return SparseVoxelTensor(geometry, channels)


def set_voxel(t: SparseVoxelTensor, coord: Sequence[int], feat: Sequence[float]) -> SparseVoxelTensor:
    return t.set_voxel(coord, feat)


def column(t: SparseVoxelTensor, i: int, j: int) -> List[Tuple[int, np.ndarray]]:
    """Entries of column (i, j) as (k, feature) pairs, ascending in k"""
    nx, ny, nz = t.geometry.extents
    if not (0 <= i < nx and 0 <= j < ny):
        raise BoundsError(f"column ({i}, {j}) outside extents {(nx, ny)}")
    lo = (i * ny + j) * nz
    keys = t.keys
    start, stop = np.searchsorted(keys, [lo, lo + nz])
    return [(int(keys[n] - lo), t.features[n].copy()) for n in range(start, stop)]


def densify(t: SparseVoxelTensor) -> np.ndarray:
    """Dense (Nx, Ny, Nz, C) array, zero at inactive coordinates"""
    dense = np.zeros(t.geometry.extents + (t.channels,), dtype=np.float64)
    c = t.coords
    dense[c[:, 0], c[:, 1], c[:, 2]] = t.features
    return dense


def sparsify(geometry: GridGeometry, dense: np.ndarray) -> SparseVoxelTensor:
    """Inverse of densify: every cell with a nonzero feature becomes an active voxel"""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 4 or dense.shape[:3] != geometry.extents:
        raise ShapeError(f"dense shape {dense.shape} does not match extents {geometry.extents}")
    coords = np.argwhere(np.any(dense != 0, axis=-1))
    return SparseVoxelTensor.from_arrays(geometry, coords, dense[tuple(coords.T)], presorted=True)


def random_sparse(geometry: GridGeometry, channels: int, density: float, seed: int = 0,
                  scale: float = 1.0) -> SparseVoxelTensor:
    """
    Random tensor with round(density * num_cells) active voxels (at least one) and features
    uniform in [-scale, scale). Deterministic for a fixed seed.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    rng = np.random.default_rng(seed)
    n_active = max(1, int(round(density * geometry.num_cells)))
    keys = np.sort(rng.choice(geometry.num_cells, size=n_active, replace=False)).astype(np.int64)
    features = rng.uniform(-scale, scale, size=(n_active, channels))
    return SparseVoxelTensor.from_arrays(geometry, geometry.unpack(keys), features, presorted=True)
