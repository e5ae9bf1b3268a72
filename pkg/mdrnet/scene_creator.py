#!/usr/bin/env python
"""
Synthetic LiDAR scenes for tests, benchmarks and the toy training task.

A scene is a ground plane one voxel above the bottom of the grid plus n box-shaped clusters
sampled on the box surfaces. Box centers and sizes are recorded as ground truth.
"""
import logging

import numpy as np

from mdrnet.raw_data_loaders import PointCloud
from mdrnet.voxgrid import GridGeometry

log = logging.getLogger("mdrnet")

# box footprint and height in cells, (min, max)
BOX_XY_CELLS = (2.0, 4.0)
BOX_Z_CELLS = (3.0, 6.0)
POINTS_PER_BOX = 200
GROUND_DENSITY = 0.5  # points per BEV cell


def synth_scene(seed: int, n_objects: int, geometry: GridGeometry) -> PointCloud:
    """
    Deterministic synthetic scene inside the geometry's range.

    :param seed: random seed, the same seed gives byte-identical points
    :param n_objects: number of box clusters, >= 0
    :param geometry: grid the scene must fit in
    :return: PointCloud with ``centers`` (n_objects, 3) and ``box_sizes`` (n_objects, 3) set
    """
    if n_objects < 0:
        raise ValueError(f"n_objects must be >= 0, got {n_objects}")
    rng = np.random.default_rng(seed)
    lo = np.asarray(geometry.origin)
    size = np.asarray(geometry.voxel_size)
    hi = np.asarray(geometry.range_max)
    nx, ny, nz = geometry.extents

    ground_z = lo[2] + 0.5 * size[2]
    n_ground = max(1, int(GROUND_DENSITY * nx * ny))
    ground = np.column_stack([
        rng.uniform(lo[0], hi[0], n_ground),
        rng.uniform(lo[1], hi[1], n_ground),
        np.full(n_ground, ground_z),
        rng.uniform(0.0, 0.3, n_ground),
    ])

    clouds = [ground]
    centers = np.zeros((n_objects, 3))
    box_sizes = np.zeros((n_objects, 3))
    for n in range(n_objects):
        dims = np.array([
            rng.uniform(*BOX_XY_CELLS) * size[0],
            rng.uniform(*BOX_XY_CELLS) * size[1],
            max(min(rng.uniform(*BOX_Z_CELLS), nz - 1.5), 0.5) * size[2],
        ])
        # boxes stand on the ground and stay one cell clear of the x/y borders
        margin = dims[:2] / 2 + size[:2]
        cxy = rng.uniform(lo[:2] + margin, np.maximum(hi[:2] - margin, lo[:2] + margin))
        center = np.array([cxy[0], cxy[1], lo[2] + size[2] + dims[2] / 2])
        clouds.append(_box_surface_points(rng, center, dims, POINTS_PER_BOX))
        centers[n] = center
        box_sizes[n] = dims

    points = np.concatenate(clouds, axis=0)
    # keep everything strictly inside the half-open range
    points[:, :3] = np.clip(points[:, :3], lo, np.nextafter(hi, lo))
    log.debug(f"synthetic scene seed={seed}: {points.shape[0]} points, {n_objects} objects")
    return PointCloud(points=points, centers=centers, box_sizes=box_sizes,
                      meta={"seed": seed, "n_objects": n_objects})


def _box_surface_points(rng: np.random.Generator, center: np.ndarray, dims: np.ndarray, n: int) -> np.ndarray:
    """n points on the four side faces and the top of an axis-aligned box, intensity in [0.6, 1]"""
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * dims
    face = rng.integers(0, 5, size=n)
    for axis, sign, f in ((0, -1, 0), (0, 1, 1), (1, -1, 2), (1, 1, 3), (2, 1, 4)):
        u[face == f, axis] = sign * dims[axis] / 2
    intensity = rng.uniform(0.6, 1.0, size=(n, 1))
    return np.concatenate([center + u, intensity], axis=1)
