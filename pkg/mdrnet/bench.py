"""
Micro-benchmark of the reduction family.

Every operator runs on the same random tensor. Its output is compared with the column-by-column
oracle first; an operator over the tolerance aborts the run before anything is timed.
"""
import logging
import time
from typing import Sequence

import numpy as np
import pandas as pd

from mdrnet.errors import OracleMismatchError
from mdrnet.oracles import reduce_oracle
from mdrnet.reduce import Reduction, ReductionKind, reduce
from mdrnet.voxgrid import GridGeometry, random_sparse

log = logging.getLogger("mdrnet")

BENCH_COLUMNS = ["operator", "grid", "active_voxels", "sparsity_pct", "mean_ms", "std_ms", "max_abs_dev"]
ORACLE_TOLERANCE = 1e-8
MIN_REPS = 5


def time_call(fn, reps: int, warmup: int = 2) -> np.ndarray:
    """Wall-clock seconds of ``reps`` calls after ``warmup`` discarded ones"""
    for _ in range(warmup):
        fn()
    times = np.zeros(reps)
    for r in range(reps):
        t0 = time.perf_counter()
        fn()
        times[r] = time.perf_counter() - t0
    return times


def bench_reductions(extents: Sequence[int], sparsity: float, channels: int, reps: int = MIN_REPS,
                     warmup: int = 2, seed: int = 0) -> pd.DataFrame:
    """
    Time every ReductionKind on one random tensor.

    :param extents: grid (Nx, Ny, Nz)
    :param sparsity: fraction of active cells, in (0, 1]
    :param channels: feature channels
    :param reps: timed repetitions, >= 5
    :param warmup: discarded repetitions
    :param seed: tensor and kernel seed
    :return: DataFrame with BENCH_COLUMNS, one row per operator
    """
    if not 0 < sparsity <= 1:
        raise ValueError(f"sparsity must be in (0, 1], got {sparsity}")
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}, got {reps}")
    geometry = GridGeometry((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), tuple(extents))
    t = random_sparse(geometry, channels, sparsity, seed=seed)
    rng = np.random.default_rng(seed)
    grid = "x".join(str(n) for n in geometry.extents)
    log.info(f"bench grid {grid}, {len(t)} active voxels, C={channels}, {reps} reps")

    rows = []
    for kind in ReductionKind:
        reduction = Reduction.create(kind, channels, geometry.extents[2], rng, name=kind.value)
        out, _ = reduce(t, reduction)
        dev = float(np.max(np.abs(out.values - reduce_oracle(t, reduction)), initial=0.0))
        if not dev <= ORACLE_TOLERANCE:
            log.error(f"{kind.value}: max abs deviation {dev:.3e} from the oracle exceeds {ORACLE_TOLERANCE:.0e}")
            raise OracleMismatchError(f"{kind.value} disagrees with its oracle (max abs deviation {dev:.3e})")
        times = time_call(lambda: reduce(t, reduction), reps, warmup) * 1e3
        rows.append({
            "operator": kind.value,
            "grid": grid,
            "active_voxels": len(t),
            "sparsity_pct": 100.0 * len(t) / geometry.num_cells,
            "mean_ms": float(times.mean()),
            "std_ms": float(times.std()),
            "max_abs_dev": dev,
        })
        log.debug(f"{kind.value}: {times.mean():.3f} ms, deviation {dev:.2e}")
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def sdr_overhead(report: pd.DataFrame) -> float:
    """Mean time of SDR-Softmax over MeanPool"""
    mean_ms = report.set_index("operator")["mean_ms"]
    return float(mean_ms[ReductionKind.SdrSoftmax.value] / mean_ms[ReductionKind.MeanPool.value])
