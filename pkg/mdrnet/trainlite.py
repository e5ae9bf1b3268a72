"""
Toy training loop: regress a BEV heatmap of synthetic object centers from the backbone output.

A 1x1 head conv maps the stage-4 map to one channel, the loss is the mean squared error against
Gaussian bumps (sigma = 1 cell) at the object centers. Plain SGD with momentum.
"""
import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mdrnet import params
from mdrnet.backbone import NUM_STAGES, BackboneConfig, BackboneState, forward
from mdrnet.errors import ConfigError, ShapeError, TrainingError
from mdrnet.scene_creator import synth_scene
from mdrnet.sparseconv import ConvKernel, GradTape, KernelGrad, backward, conv2d
from mdrnet.voxelizer import VoxelizeConfig, voxelize
from mdrnet.voxgrid import DenseBevMap, SparseVoxelTensor

log = logging.getLogger("mdrnet")

TARGET_SIGMA = 1.0  # cells at stage-4 resolution


@dataclass
class ToyTask:
    input: SparseVoxelTensor
    target: DenseBevMap
    centers: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.target.channels != 1:
            raise ShapeError(f"toy target must have 1 channel, got {self.target.channels}")
        if np.any(self.target.values < 0) or np.any(self.target.values > 1):
            raise ValueError("toy target values must lie in [0, 1]")


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    steps: int = 200
    seed: int = 0

    def __post_init__(self):
        # lr = 0 is allowed, it freezes the parameters
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")


def gaussian_target(centers_xy: np.ndarray, origin_xy: Sequence[float], cell_xy: Sequence[float],
                    shape: Tuple[int, int], sigma: float = TARGET_SIGMA) -> DenseBevMap:
    """
    Max over objects of exp(-d^2 / (2 sigma^2)), d the distance in cells from each cell center.

    :param centers_xy: (n, 2) object centers in meters
    :param origin_xy: grid origin in meters
    :param cell_xy: cell size in meters at the target resolution
    :param shape: (Nx, Ny) of the target
    """
    nx, ny = shape
    ii, jj = np.meshgrid(np.arange(nx) + 0.5, np.arange(ny) + 0.5, indexing="ij")
    target = np.zeros((nx, ny))
    for c in np.asarray(centers_xy).reshape(-1, 2):
        u = (c - np.asarray(origin_xy)) / np.asarray(cell_xy)
        d2 = (ii - u[0]) ** 2 + (jj - u[1]) ** 2
        target = np.maximum(target, np.exp(-d2 / (2 * sigma ** 2)))
    return DenseBevMap(target[..., None])


def make_toy_tasks(n_scenes: int, seed: int, voxelize_cfg: VoxelizeConfig, backbone_cfg: BackboneConfig,
                   n_objects: int = 3) -> List[ToyTask]:
    """Synthetic scenes seed, seed + 1, ... voxelized, with targets at the backbone's output resolution"""
    if n_scenes < 1:
        raise ConfigError(f"n_scenes must be >= 1, got {n_scenes}")
    geometry = voxelize_cfg.geometry
    if geometry.extents != backbone_cfg.input_extents:
        raise ConfigError(f"voxel grid {geometry.extents} != backbone input extents {backbone_cfg.input_extents}")
    scale = np.asarray(backbone_cfg.downsample_stride[:2]) ** (NUM_STAGES - 1)
    cell_xy = np.asarray(geometry.voxel_size[:2]) * scale
    shape = backbone_cfg.bev_extents()[-1]
    tasks = []
    for n in range(n_scenes):
        pc = synth_scene(seed + n, n_objects, geometry)
        t0 = voxelize(pc, voxelize_cfg)
        target = gaussian_target(pc.centers[:, :2], geometry.origin[:2], cell_xy, shape)
        tasks.append(ToyTask(input=t0, target=target, centers=pc.centers))
    log.info(f"built {n_scenes} toy tasks, target shape {shape}")
    return tasks


def attach_head(state: BackboneState, seed: int = 0) -> ConvKernel:
    """Give the state a 1x1 head (C4 -> 1) if it has none"""
    if state.head is None:
        rng = np.random.default_rng(seed)
        state.head = ConvKernel.init("head", (1, 1), state.config.stage_channels[-1], 1, rng)
    return state.head


def loss_mse(pred: DenseBevMap, target: DenseBevMap, head: Optional[ConvKernel] = None) -> float:
    """
    Mean squared error over all cells, after the 1x1 head when one is given.

    :param pred: backbone output, or an already 1-channel prediction when head is None
    :param target: (Nx, Ny, 1) target map
    :param head: optional 1x1 conv to 1 channel
    """
    out = conv2d(pred, head) if head is not None else pred
    if out.shape != target.shape:
        raise ShapeError(f"prediction shape {out.shape} != target shape {target.shape}")
    return float(np.mean((out.values - target.values) ** 2))


def sample_loss_and_grads(state: BackboneState, task: ToyTask) -> Tuple[float, Dict[str, KernelGrad]]:
    """Loss of one task and the gradient of every kernel"""
    tape = GradTape()
    out = conv2d(forward(state, task.input, tape), state.head, tape=tape)
    if out.shape != task.target.shape:
        raise ShapeError(f"prediction shape {out.shape} != target shape {task.target.shape}")
    diff = out.values - task.target.values
    loss = float(np.mean(diff ** 2))
    param_grads, _ = backward(tape, out, 2.0 * diff / diff.size)
    return loss, param_grads


def _first_non_finite(state: BackboneState, grads: Dict[str, KernelGrad]) -> Optional[str]:
    for k in state.kernels():
        g = grads.get(k.name)
        if g is not None and not (np.all(np.isfinite(g.weights)) and np.all(np.isfinite(g.bias))):
            return k.name
    return None


def train(state: BackboneState, tasks: Sequence[ToyTask], cfg: SgdConfig,
          num_threads: Optional[int] = None) -> Tuple[BackboneState, List[float]]:
    """
    SGD with momentum on every kernel, the loss being the mean over tasks.

    The input state is left untouched, a trained copy is returned with the per-step losses
    (loss_curve[s] is the loss before update s).

    :param state: backbone, a head is attached from cfg.seed if it has none
    :param tasks: at least one ToyTask
    :param cfg: SgdConfig
    :param num_threads: worker cap for per-task forwards, defaults to MDRNET_THREADS
    :return: (trained state, loss curve)
    """
    if not tasks:
        raise ConfigError("train needs at least one task")
    state = copy.deepcopy(state)
    attach_head(state, cfg.seed)
    kernels = state.kernels()
    velocity = {k.name: KernelGrad(np.zeros_like(k.weights), np.zeros_like(k.bias)) for k in kernels}
    workers = min(len(tasks), num_threads or params.get_num_threads())
    curve = []

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for step in range(cfg.steps):
            # map keeps task order, the sum below is therefore deterministic
            results = list(pool.map(lambda task: sample_loss_and_grads(state, task), tasks))
            loss = sum(r[0] for r in results) / len(tasks)
            grads = {}
            for _, g in results:
                for name, kg in g.items():
                    grads[name] = grads[name] + kg if name in grads else kg
            bad = _first_non_finite(state, grads)
            if not np.isfinite(loss) or bad is not None:
                msg = f"non-finite loss {loss} at step {step}, first non-finite gradient: {bad}"
                log.error(msg)
                raise TrainingError(msg)
            curve.append(loss)
            for k in kernels:
                g = grads[k.name]
                v = velocity[k.name]
                v.weights = cfg.momentum * v.weights + g.weights / len(tasks)
                v.bias = cfg.momentum * v.bias + g.bias / len(tasks)
                k.weights -= cfg.learning_rate * v.weights
                k.bias -= cfg.learning_rate * v.bias
            log.debug(f"step {step}: loss {loss:.6g}")
    log.info(f"trained {cfg.steps} steps, loss {curve[0]:.6g} -> {curve[-1]:.6g}")
    return state, curve


def loss_curve_frame(curve: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({"step": np.arange(len(curve)), "loss": np.asarray(curve, dtype=np.float64)})
