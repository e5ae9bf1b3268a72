#!/usr/bin/env python
"""
Raw data loaders for mdrnet

Module contains one loader (and where we emit the format, one writer) per file format:
    - LiDAR point files, 16-byte little-endian float32 records (x, y, z, intensity)
    - sparse tensor files, magic "SVT1"
    - convolution kernel blobs, magic "KRN1", and backbone states (blob + YAML manifest)
    - reduction weight text files, one "i j k weight" line per voxel
    - grayscale PGM images
    - CSV tables (loss curves, bench reports)
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from mdrnet.errors import FormatError
from mdrnet.voxgrid import GridGeometry, SparseVoxelTensor

log = logging.getLogger("mdrnet")

StrPath = Union[str, Path]

POINT_DTYPE = np.dtype("<f4")
TENSOR_MAGIC = b"SVT1"
# origin then voxel size, after the SVT1 records
GEOMETRY_TRAILER = struct.Struct("<6d")
KERNEL_MAGIC = b"KRN1"


@dataclass
class PointCloud:
    """
    LiDAR points as an (N, 4) float64 array of x, y, z (m) and intensity in [0, 1].
    Synthetic scenes also carry the ground-truth object centers and box sizes.
    """

    points: np.ndarray
    centers: Optional[np.ndarray] = None
    box_sizes: Optional[np.ndarray] = None
    rejected: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __len__(self):
        return self.points.shape[0]


def load_bin(path: StrPath) -> PointCloud:
    """
    Load a KITTI-convention velodyne file: consecutive 16-byte records of four little-endian
    float32 (x, y, z, intensity).

    Records holding a non-finite value are rejected and counted, intensities are clamped to [0, 1].

    :param path: path to the .bin file
    :return: PointCloud with ``rejected`` set to the number of dropped records
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16 != 0:
        raise FormatError(f"{path}: byte length {len(raw)} is not a multiple of 16, truncated file?")
    data = np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(data), axis=1)
    rejected = int(np.count_nonzero(~finite))
    if rejected:
        log.warning(f"{path}: rejected {rejected} of {data.shape[0]} records with non-finite values")
    data = data[finite]
    data[:, 3] = np.clip(data[:, 3], 0.0, 1.0)
    return PointCloud(points=data, rejected=rejected)


def write_bin(path: StrPath, points: np.ndarray) -> None:
    """Write an (N, 4) array as float32 records, the inverse of load_bin"""
    points = np.asarray(points).reshape(-1, 4)
    Path(path).write_bytes(points.astype(POINT_DTYPE).tobytes())


def save_tensor(path: StrPath, t: SparseVoxelTensor) -> None:
    """
    Tensor file: magic "SVT1", u32 Nx, Ny, Nz, C, entry_count (little-endian), then entry_count
    records of (u32 i, u32 j, u32 k, C x f64 features) sorted by (i, j, k).
    Origin and voxel size follow the records as 6 f64 (48 bytes) so the geometry round-trips,
    a file ending right after the records reads back on a unit grid at the origin.
    """
    nx, ny, nz = t.geometry.extents
    record = np.dtype([("ijk", "<u4", (3,)), ("feat", "<f8", (t.channels,))])
    recs = np.zeros(len(t), dtype=record)
    recs["ijk"] = t.coords
    recs["feat"] = t.features
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<5I", nx, ny, nz, t.channels, len(t)))
        f.write(recs.tobytes())
        f.write(GEOMETRY_TRAILER.pack(*t.geometry.origin, *t.geometry.voxel_size))


def load_tensor(path: StrPath) -> SparseVoxelTensor:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a sparse tensor file (bad magic)")
    nx, ny, nz, c, n = struct.unpack("<5I", raw[4:24])
    record = np.dtype([("ijk", "<u4", (3,)), ("feat", "<f8", (c,))])
    end = 24 + n * record.itemsize
    if len(raw) < end:
        raise FormatError(f"{path}: truncated, expected {n} records")
    recs = np.frombuffer(raw[24:end], dtype=record)
    if len(raw) == end + GEOMETRY_TRAILER.size:
        tail = GEOMETRY_TRAILER.unpack(raw[end:])
        origin, voxel_size = tail[:3], tail[3:]
    elif len(raw) == end:
        origin, voxel_size = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    else:
        raise FormatError(f"{path}: {len(raw) - end} bytes after the records, "
                          f"expected 0 or {GEOMETRY_TRAILER.size}")
    geometry = GridGeometry(origin, voxel_size, (nx, ny, nz))
    return SparseVoxelTensor.from_arrays(geometry, recs["ijk"].astype(np.int64), recs["feat"])


def kernel_to_blob(kernel) -> bytes:
    """
    Kernel blob: magic "KRN1", u32 name length, utf-8 name, u32 number of spatial dims,
    u32 spatial dims, u32 in_channels, u32 out_channels, then the weights and the bias as
    little-endian f64 in C order.
    """
    name = kernel.name.encode("utf-8")
    spatial = kernel.spatial_shape
    header = KERNEL_MAGIC + struct.pack("<I", len(name)) + name
    header += struct.pack(f"<I{len(spatial)}I", len(spatial), *spatial)
    header += struct.pack("<2I", kernel.in_channels, kernel.out_channels)
    return header + kernel.weights.astype("<f8").tobytes() + kernel.bias.astype("<f8").tobytes()


def kernel_from_blob(buffer: bytes, offset: int = 0):
    """Decode one kernel starting at offset, returns (ConvKernel, next offset)"""
    from mdrnet.sparseconv import ConvKernel

    try:
        if buffer[offset:offset + 4] != KERNEL_MAGIC:
            raise FormatError(f"bad kernel magic at byte {offset}")
        offset += 4
        (name_len,) = struct.unpack_from("<I", buffer, offset)
        offset += 4
        name = buffer[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", buffer, offset)
        offset += 4
        spatial = struct.unpack_from(f"<{ndim}I", buffer, offset)
        offset += 4 * ndim
        cin, cout = struct.unpack_from("<2I", buffer, offset)
        offset += 8
        n_weights = int(np.prod(spatial)) * cin * cout
        weights = np.frombuffer(buffer, dtype="<f8", count=n_weights, offset=offset)
        offset += 8 * n_weights
        bias = np.frombuffer(buffer, dtype="<f8", count=cout, offset=offset)
        offset += 8 * cout
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"truncated or corrupt kernel blob: {e}")
    kernel = ConvKernel(name, weights.reshape(tuple(spatial) + (cin, cout)).astype(np.float64), bias.astype(np.float64))
    return kernel, offset


def save_kernels(path: StrPath, kernels) -> None:
    with open(path, "wb") as f:
        for k in kernels:
            f.write(kernel_to_blob(k))


def load_kernels(path: StrPath) -> list:
    buffer = Path(path).read_bytes()
    kernels, offset = [], 0
    while offset < len(buffer):
        k, offset = kernel_from_blob(buffer, offset)
        kernels.append(k)
    return kernels


def save_backbone(path: StrPath, state) -> Path:
    """
    Save a BackboneState: kernel blobs concatenated in ``path`` and a YAML manifest listing the
    config and every kernel shape next to it (same name, .yml suffix)
    """
    path = Path(path)
    kernels = state.kernels()
    save_kernels(path, kernels)
    manifest = {
        "config": state.config.to_dict(),
        "kernels": [{"name": k.name, "shape": list(k.weights.shape)} for k in kernels],
    }
    manifest_path = path.with_suffix(".yml")
    with open(manifest_path, "w") as f:
        yaml.safe_dump(manifest, f, default_flow_style=None, sort_keys=False)
    log.info(f"Saved {len(kernels)} kernels to {path} with manifest {manifest_path}")
    return manifest_path


def load_backbone(path: StrPath):
    from mdrnet.backbone import BackboneConfig, build

    path = Path(path)
    with open(path.with_suffix(".yml"), "r") as f:
        manifest = yaml.safe_load(f)
    config = BackboneConfig.from_dict(manifest["config"])
    state = build(config, seed=0)
    loaded = {k.name: k for k in load_kernels(path)}
    expected = {k["name"]: tuple(k["shape"]) for k in manifest["kernels"]}
    if "head" in loaded:
        state.head = loaded["head"]
    for k in state.kernels():
        if k.name not in loaded or loaded[k.name].weights.shape != expected.get(k.name):
            raise FormatError(f"{path}: kernel {k.name} missing or with wrong shape")
        k.weights[...] = loaded[k.name].weights
        k.bias[...] = loaded[k.name].bias
    return state


def save_weights_text(path: StrPath, lines: List[Tuple[int, int, int, float]]) -> None:
    """Reduction weights text format, one ``i j k weight`` line per voxel"""
    with open(path, "w") as f:
        for i, j, k, w in lines:
            f.write(f"{i} {j} {k} {w!r}\n")


def load_weights_text(path: StrPath) -> np.ndarray:
    """Parse a weights text file into an (N, 4) array of i, j, k, weight"""
    rows = []
    with open(path, "r") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{n}: expected 'i j k weight', got {line.strip()!r}")
            try:
                i, j, k = (int(p) for p in parts[:3])
                w = float(parts[3])
            except ValueError:
                raise FormatError(f"{path}:{n}: could not parse {line.strip()!r}")
            if min(i, j, k) < 0 or not np.isfinite(w):
                raise FormatError(f"{path}:{n}: negative index or non-finite weight")
            rows.append((i, j, k, w))
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_pgm(path: StrPath, image: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale PGM, image[row, col]"""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM image must be 2D, got shape {image.shape}")
    rows, cols = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path: StrPath) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise FormatError(f"{path}: only 8-bit binary PGM is supported")
    cols, rows = int(fields[1]), int(fields[2])
    pixels = raw[pos + 1:pos + 1 + rows * cols]
    if len(pixels) != rows * cols:
        raise FormatError(f"{path}: truncated PGM data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(rows, cols)


def save_csv(path: StrPath, df: pd.DataFrame) -> None:
    df.to_csv(path, index=False, float_format="%.17g")


def load_csv(path: StrPath) -> pd.DataFrame:
    return pd.read_csv(path)
