"""
Top-down heatmaps of reduction weights: pixel (i, j) is the largest weight of column (i, j),
scaled from [0, 1] to [0, 255]. Vacant columns are black.

Ground columns hold one voxel and light up at full weight, so the object check below looks at
the weight held above each column's lowest voxel instead.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from mdrnet.reduce import ReductionWeights

log = logging.getLogger("mdrnet")


def weights_to_image(rows: np.ndarray, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    :param rows: (N, 4) array of i, j, k, weight
    :param shape: (Nx, Ny) of the image, defaults to the largest i and j + 1
    :return: uint8 image indexed [i, j]
    """
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    ij = rows[:, :2].astype(np.int64)
    if shape is None:
        shape = tuple(ij.max(axis=0) + 1) if rows.shape[0] else (1, 1)
    if rows.shape[0] and np.any(ij >= np.asarray(shape)):
        raise ValueError(f"weight coordinates exceed image shape {shape}")
    peak = np.zeros(shape)
    np.maximum.at(peak, (ij[:, 0], ij[:, 1]), np.clip(rows[:, 3], 0.0, 1.0))
    return np.round(peak * 255).astype(np.uint8)


def heatmap(weights: ReductionWeights) -> np.ndarray:
    rows = np.column_stack([weights.coords, weights.scalar_weights()]) if len(weights) else np.zeros((0, 4))
    return weights_to_image(rows, weights.geometry.bev_shape)


def objects_with_bright_footprint(weights: ReductionWeights, centers: np.ndarray, box_sizes: np.ndarray) -> int:
    """
    Number of objects whose BEV footprint holds a column with more elevated weight mass than the
    median over all multi-voxel columns.

    Elevated mass is the weight above a column's lowest voxel. Single-voxel columns, the bare
    ground, carry none and are left out of the median.

    :param weights: reduction weights of a scene
    :param centers: (n, 3) object centers in meters
    :param box_sizes: (n, 3) object sizes in meters
    """
    ij, counts, mass = weights.elevated_mass()
    tall = counts > 1
    if not np.any(tall):
        return 0
    threshold = np.median(mass[tall])
    nx, ny, _ = weights.geometry.extents
    elevated = np.zeros((nx, ny))
    elevated[ij[tall, 0], ij[tall, 1]] = mass[tall]
    origin = np.asarray(weights.geometry.origin[:2])
    size = np.asarray(weights.geometry.voxel_size[:2])
    top = np.array([nx - 1, ny - 1])
    count = 0
    for c, s in zip(np.asarray(centers).reshape(-1, 3), np.asarray(box_sizes).reshape(-1, 3)):
        lo = np.clip(np.floor((c[:2] - s[:2] / 2 - origin) / size).astype(int), 0, top)
        hi = np.clip(np.floor((c[:2] + s[:2] / 2 - origin) / size).astype(int), 0, top)
        if np.any(elevated[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1] > threshold):
            count += 1
    log.debug(f"{count} of {len(np.asarray(centers).reshape(-1, 3))} footprints above median elevated mass "
              f"{threshold:.4g}")
    return count
