"""
Point cloud to sparse voxel tensor

Each occupied voxel carries the mean over its points of (x - cx, y - cy, z - cz, intensity), where
(cx, cy, cz) is the voxel center, so the stage-0 tensor has C = 4 channels.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mdrnet.errors import GeometryError
from mdrnet.raw_data_loaders import PointCloud
from mdrnet.voxgrid import GridGeometry, SparseVoxelTensor

log = logging.getLogger("mdrnet")

VOXEL_CHANNELS = 4


@dataclass(frozen=True)
class VoxelizeConfig:
    geometry: GridGeometry
    range_min: tuple
    range_max: tuple
    max_points_per_voxel: Optional[int] = 32  # None means no cap

    def __post_init__(self):
        range_min = np.asarray(self.range_min, dtype=np.float64)
        range_max = np.asarray(self.range_max, dtype=np.float64)
        if np.any(range_max <= range_min):
            raise GeometryError(f"range_max {range_max.tolist()} must exceed range_min {range_min.tolist()}")
        if not np.allclose(self.geometry.origin, range_min):
            raise GeometryError("geometry origin must equal range_min")
        expected = np.round((range_max - range_min) / np.asarray(self.geometry.voxel_size))
        if tuple(int(n) for n in expected) != self.geometry.extents:
            raise GeometryError(
                f"extents {self.geometry.extents} inconsistent with ranges and voxel size, expected "
                f"{tuple(int(n) for n in expected)}")
        if self.max_points_per_voxel is not None and self.max_points_per_voxel < 1:
            raise GeometryError(f"max_points_per_voxel must be >= 1, got {self.max_points_per_voxel}")
        object.__setattr__(self, "range_min", tuple(range_min.tolist()))
        object.__setattr__(self, "range_max", tuple(range_max.tolist()))

    @classmethod
    def from_ranges(cls, voxel_size: Sequence[float], range_min: Sequence[float], range_max: Sequence[float],
                    max_points_per_voxel: Optional[int] = 32) -> "VoxelizeConfig":
        geometry = GridGeometry.from_range(range_min, range_max, voxel_size)
        return cls(geometry, tuple(range_min), tuple(range_max), max_points_per_voxel)

    @classmethod
    def for_geometry(cls, geometry: GridGeometry, max_points_per_voxel: Optional[int] = 32) -> "VoxelizeConfig":
        return cls(geometry, geometry.origin, geometry.range_max, max_points_per_voxel)


def voxelize(pc: PointCloud, cfg: VoxelizeConfig, return_stats: bool = False):
    """
    Bin points into voxels of cfg.geometry and average their center-relative offsets.

    Points outside [range_min, range_max) are dropped. Within a voxel, points are sorted by
    (x, y, z, intensity) before capping at max_points_per_voxel and before summation, so the result
    does not depend on the input point order.

    :param pc: input point cloud
    :param cfg: voxelization config
    :param return_stats: also return a dict with kept/dropped/capped point counts
    :return: SparseVoxelTensor with C = 4 (and the stats dict if requested)
    """
    geometry = cfg.geometry
    points = pc.points
    lo = np.asarray(cfg.range_min)
    hi = np.asarray(cfg.range_max)
    size = np.asarray(geometry.voxel_size)

    inside = np.all((points[:, :3] >= lo) & (points[:, :3] < hi), axis=1)
    cells = np.floor((points[:, :3] - lo) / size).astype(np.int64)
    # floor can land on N for points a hair below range_max
    inside &= geometry.in_bounds(cells)
    points = points[inside]
    cells = cells[inside]
    stats = {"input": int(pc.points.shape[0]), "kept": int(points.shape[0]),
             "dropped": int(pc.points.shape[0] - points.shape[0]), "capped": 0}

    if points.shape[0] == 0:
        t = SparseVoxelTensor(geometry, VOXEL_CHANNELS)
        return (t, stats) if return_stats else t

    keys = geometry.pack(cells)
    order = np.lexsort((points[:, 3], points[:, 2], points[:, 1], points[:, 0], keys))
    keys = keys[order]
    points = points[order]
    cells = cells[order]

    uniq, starts, counts = np.unique(keys, return_index=True, return_counts=True)
    if cfg.max_points_per_voxel is not None:
        rank = np.arange(keys.size) - np.repeat(starts, counts)
        keep = rank < cfg.max_points_per_voxel
        stats["capped"] = int(np.count_nonzero(~keep))
        if stats["capped"]:
            log.debug(f"dropped {stats['capped']} points over the per-voxel cap of {cfg.max_points_per_voxel}")
        keys, points, cells = keys[keep], points[keep], cells[keep]
        uniq, starts, counts = np.unique(keys, return_index=True, return_counts=True)

    centers = lo + (cells + 0.5) * size
    per_point = np.concatenate([points[:, :3] - centers, points[:, 3:4]], axis=1)
    sums = np.add.reduceat(per_point, starts, axis=0)
    features = sums / counts[:, None]
    t = SparseVoxelTensor.from_arrays(geometry, geometry.unpack(uniq), features, presorted=True)
    log.debug(f"voxelized {stats['kept']} of {stats['input']} points into {len(t)} voxels")
    return (t, stats) if return_stats else t
