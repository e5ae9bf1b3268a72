import numpy as np

from mdrnet.voxgrid import GridGeometry, SparseVoxelTensor


def unit_geometry(nx: int, ny: int = None, nz: int = None) -> GridGeometry:
    """Grid of 1 m cells at the origin, cubic when only nx is given"""
    ny = nx if ny is None else ny
    nz = nx if nz is None else nz
    return GridGeometry((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (nx, ny, nz))


def tensor_from_entries(geometry: GridGeometry, entries: dict) -> SparseVoxelTensor:
    """{(i, j, k): feature list} -> tensor"""
    channels = len(next(iter(entries.values())))
    t = SparseVoxelTensor(geometry, channels)
    for coord, feat in entries.items():
        t.set_voxel(coord, feat)
    return t


def random_column_tensor(geometry: GridGeometry, channels: int, n_columns: int, seed: int = 0) -> SparseVoxelTensor:
    """Tensor with n_columns occupied columns, each holding 1 to Nz random voxels"""
    rng = np.random.default_rng(seed)
    nx, ny, nz = geometry.extents
    cols = rng.choice(nx * ny, size=n_columns, replace=False)
    coords = []
    for c in cols:
        ks = rng.choice(nz, size=rng.integers(1, nz + 1), replace=False)
        coords += [(c // ny, c % ny, k) for k in ks]
    coords = np.array(coords)
    return SparseVoxelTensor.from_arrays(geometry, coords, rng.uniform(-1, 1, (len(coords), channels)))
