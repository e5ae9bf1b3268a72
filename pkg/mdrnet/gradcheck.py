"""
Central finite-difference checks of every differentiable op.

Each case projects the op output on a fixed random tensor R so the scalar loss is sum(out * R),
runs one taped forward and backward, then perturbs sampled entries of every kernel and every
input array by +-h. The error of one array is the largest per-entry relative error
|a - n| / max(|a|, |n|, floor), the floor scaled to the largest entry of the array.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from mdrnet.backbone import BackboneConfig, build, forward
from mdrnet.reduce import Reduction, ReductionKind, reduce
from mdrnet.sparseconv import (ConvKernel, GradTape, conv2d, residual_block2d, strided_sparse_conv3d,
                               submanifold_conv3d)
from mdrnet.voxgrid import DenseBevMap, GridGeometry, SparseVoxelTensor, random_sparse

log = logging.getLogger("mdrnet")

OP_THRESHOLD = 1e-5
END_TO_END_THRESHOLD = 1e-4
STEP = 1e-4

# grid edge, BEV map edge, entries sampled per array
SIZES = {
    "tiny": {"grid": 4, "map": 5, "entries": 6},
    "small": {"grid": 6, "map": 8, "entries": 16},
}


@dataclass
class GradcheckCase:
    name: str
    run: Callable[[Optional[GradTape]], object]
    kernels: List[ConvKernel] = field(default_factory=list)
    inputs: List[object] = field(default_factory=list)
    h: float = STEP
    threshold: float = OP_THRESHOLD


@dataclass
class GradcheckResult:
    op: str
    worst_rel_error: float
    threshold: float
    worst_array: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.worst_rel_error < self.threshold)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.op:<28s} {self.worst_rel_error:.3e} < {self.threshold:.0e} {status} {self.worst_array}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-9,
                   scale_floor: float = 1e-3) -> float:
    """
    Largest per-entry relative error between two gradient samples.

    Entries below scale_floor times the largest magnitude in either sample are measured against that
    level instead of their own size, so rounding noise on near-zero entries does not count as error.
    """
    a = np.abs(np.ravel(analytic))
    n = np.abs(np.ravel(numeric))
    if a.size == 0:
        return 0.0
    level = max(floor, scale_floor * max(a.max(), n.max()))
    diff = np.abs(np.ravel(analytic) - np.ravel(numeric))
    return float(np.max(diff / np.maximum(np.maximum(a, n), level)))


def _array_of(value) -> np.ndarray:
    if isinstance(value, SparseVoxelTensor):
        return value.features
    if isinstance(value, DenseBevMap):
        return value.values
    return value


def check_case(case: GradcheckCase, rng: np.random.Generator, max_entries: int) -> GradcheckResult:
    """Worst relative error over every kernel and input array of one case"""
    out = _array_of(case.run(None))
    projection = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(_array_of(case.run(None)) * projection))

    tape = GradTape()
    param_grads, input_grads = tape.backward(case.run(tape), projection)
    targets = []
    for k in case.kernels:
        targets.append((f"{k.name}.weights", k.weights, param_grads[k.name].weights))
        targets.append((f"{k.name}.bias", k.bias, param_grads[k.name].bias))
    for n, value in enumerate(case.inputs):
        targets.append((f"input{n}", _array_of(value), input_grads[value]))

    worst, worst_name = 0.0, ""
    for name, array, analytic in targets:
        if array.size == 0:
            continue
        flat = array.reshape(-1)
        if not np.shares_memory(flat, array):
            raise RuntimeError(f"{case.name}: {name} is not contiguous, cannot perturb in place")
        idx = np.sort(rng.choice(array.size, size=min(max_entries, array.size), replace=False))
        numeric = np.zeros(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + case.h
            plus = loss()
            flat[i] = orig - case.h
            minus = loss()
            flat[i] = orig
            numeric[n] = (plus - minus) / (2 * case.h)
        err = relative_error(np.reshape(analytic, -1)[idx], numeric)
        if err >= worst:
            worst, worst_name = err, name
    return GradcheckResult(case.name, worst, case.threshold, worst_name)


def build_cases(seed: int = 0, size: str = "small") -> List[GradcheckCase]:
    if size not in SIZES:
        raise ValueError(f"size must be one of {sorted(SIZES)}, got {size!r}")
    dims = SIZES[size]
    rng = np.random.default_rng(seed)
    n = dims["grid"]
    geometry = GridGeometry((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (n, n, n))
    cases = []

    t = random_sparse(geometry, 3, 0.3, seed=seed)
    k = ConvKernel.init("subm", (3, 3, 3), 3, 2, rng)
    k.bias[:] = rng.uniform(-0.5, 0.5, k.bias.shape)
    cases.append(GradcheckCase("submanifold_conv3d", lambda tape: submanifold_conv3d(t, k, tape), [k], [t]))

    t_s = random_sparse(geometry, 3, 0.3, seed=seed + 1)
    k_s = ConvKernel.init("down", (3, 3, 3), 3, 2, rng)
    k_s.bias[:] = rng.uniform(-0.5, 0.5, k_s.bias.shape)
    cases.append(GradcheckCase("strided_sparse_conv3d", lambda tape: strided_sparse_conv3d(t_s, k_s, (2, 2, 2), tape),
                               [k_s], [t_s]))

    m = DenseBevMap(rng.uniform(-1, 1, (dims["map"], dims["map"], 3)))
    k2 = ConvKernel.init("conv2d", (3, 3), 3, 2, rng)
    k2.bias[:] = rng.uniform(-0.5, 0.5, k2.bias.shape)
    cases.append(GradcheckCase("conv2d", lambda tape: conv2d(m, k2, tape=tape), [k2], [m]))
    cases.append(GradcheckCase("conv2d_stride2", lambda tape: conv2d(m, k2, stride=2, tape=tape), [k2], [m]))

    k1r = ConvKernel.init("res.conv1", (3, 3), 3, 3, rng)
    k2r = ConvKernel.init("res.conv2", (3, 3), 3, 3, rng)
    for kk in (k1r, k2r):
        kk.bias[:] = rng.uniform(-0.2, 0.2, kk.bias.shape)
    cases.append(GradcheckCase("residual_block2d", lambda tape: residual_block2d(m, k1r, k2r, tape), [k1r, k2r], [m]))

    for kind in ReductionKind:
        t_r = random_sparse(geometry, 3, 0.5, seed=seed + 2)
        reduction = Reduction.create(kind, 3, n, rng, name=kind.value)
        kernels = [reduction.kernel] if reduction.kernel is not None else []
        for kk in kernels:
            # larger estimator weights keep the normalizations away from uniform
            kk.weights *= 3.0
            kk.bias[:] = rng.uniform(-0.5, 0.5, kk.bias.shape)
        cases.append(GradcheckCase(f"reduce_{kind.value}",
                                   lambda tape, t_r=t_r, r=reduction: reduce(t_r, r, tape)[0],
                                   kernels, [t_r]))

    cases.append(backbone_case(seed))
    return cases


def backbone_case(seed: int = 0, max_active: int = 10) -> GradcheckCase:
    """Scalar loss through the whole backbone, stage channels (2, 4, 4, 4) on an 8x8x8 grid"""
    cfg = BackboneConfig(input_extents=(8, 8, 8), stage_channels=(2, 4, 4, 4))
    state = build(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k in state.kernels():
        k.bias[:] = rng.uniform(-0.1, 0.1, k.bias.shape)
    geometry = GridGeometry((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), cfg.input_extents)
    t0 = random_sparse(geometry, cfg.input_channels, max_active / geometry.num_cells, seed=seed)
    return GradcheckCase("backbone", lambda tape: forward(state, t0, tape), state.kernels(), [t0],
                         threshold=END_TO_END_THRESHOLD)


def run_suite(seed: int = 0, size: str = "small") -> List[GradcheckResult]:
    """Run every case, results in a fixed order"""
    rng = np.random.default_rng(seed)
    results = []
    for case in build_cases(seed, size):
        result = check_case(case, rng, SIZES[size]["entries"])
        log.debug(result.line())
        results.append(result)
    return results
