"""
Dual-branch backbone: a 4-stage sparse voxel branch and a 4-stage dense BEV branch.

Voxel stage l (1..4): x_l = relu(down_l(relu(subm_l(x_{l-1})))), x_0 = relu(lift(t0))
BEV stage 1:          y_1 = blocks_1(reduce_1(x_0))
BEV stage l (2..4):   y_l = blocks_l(reduce_l(x_{l-1}) + bev_down_l(y_{l-1}))
The residual add of reduce_l is skipped for stages outside ``msr_stages`` and moved after the
blocks when ``fuse_before_blocks`` is False. The output is y_4.

The pillar baseline has no voxel branch: y_1 = blocks_1(stem(maxpool(t0))), then the BEV stages.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from mdrnet.errors import ConfigError, ShapeError
from mdrnet.reduce import Reduction, ReductionKind, ReductionWeights, reduce
from mdrnet.sparseconv import (ConvKernel, GradTape, add, conv2d, residual_block2d, sparse_relu,
                               strided_sparse_conv3d, submanifold_conv3d)
from mdrnet.voxelizer import VOXEL_CHANNELS
from mdrnet.voxgrid import DenseBevMap, SparseVoxelTensor

log = logging.getLogger("mdrnet")

NUM_STAGES = 4
MSR_STAGES = frozenset({2, 3, 4})


@dataclass(frozen=True)
class BackboneConfig:
    input_extents: Tuple[int, int, int]
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    bev_blocks: Tuple[int, ...] = (1, 2, 2, 2)
    reduction_stage1: ReductionKind = ReductionKind.SdrSoftmax
    reduction_stages2to4: ReductionKind = ReductionKind.FullHeightSparseConv
    msr_stages: FrozenSet[int] = MSR_STAGES
    fuse_before_blocks: bool = True
    downsample_stride: Tuple[int, int, int] = (2, 2, 2)
    downsample_kernel: Tuple[int, int, int] = (3, 3, 3)
    baseline_pillar: bool = False
    input_channels: int = VOXEL_CHANNELS

    def __post_init__(self):
        for name in ("input_extents", "stage_channels", "bev_blocks", "downsample_stride", "downsample_kernel"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "msr_stages", frozenset(int(s) for s in self.msr_stages))
        if len(self.input_extents) != 3 or min(self.input_extents) < 1:
            raise ConfigError(f"input_extents must be 3 positive counts, got {self.input_extents}")
        if len(self.stage_channels) != NUM_STAGES or min(self.stage_channels) < 1:
            raise ConfigError(f"stage_channels must be {NUM_STAGES} positive counts, got {self.stage_channels}")
        # 0 blocks is allowed, it leaves a stage as the bare fusion
        if len(self.bev_blocks) != NUM_STAGES or min(self.bev_blocks) < 0:
            raise ConfigError(f"bev_blocks must be {NUM_STAGES} counts >= 0, got {self.bev_blocks}")
        if not self.msr_stages <= MSR_STAGES:
            raise ConfigError(f"msr_stages must be a subset of {sorted(MSR_STAGES)}, got {sorted(self.msr_stages)}")
        if len(self.downsample_stride) != 3 or min(self.downsample_stride) < 1:
            raise ConfigError(f"downsample_stride must be 3 counts >= 1, got {self.downsample_stride}")
        if self.downsample_stride[0] != self.downsample_stride[1]:
            raise ConfigError("downsample_stride must be equal along x and y to keep both branches aligned")
        if len(self.downsample_kernel) != 3 or min(self.downsample_kernel) < 1:
            raise ConfigError(f"downsample_kernel must be 3 counts >= 1, got {self.downsample_kernel}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")

    @property
    def bev_stride(self) -> int:
        return self.downsample_stride[0]

    def voxel_extents(self) -> List[Tuple[int, int, int]]:
        """Extents of x_0 .. x_4"""
        out = [self.input_extents]
        for _ in range(NUM_STAGES):
            out.append(tuple(math.ceil(n / s) for n, s in zip(out[-1], self.downsample_stride)))
        return out

    def bev_extents(self) -> List[Tuple[int, int]]:
        """Extents of y_1 .. y_4"""
        return [e[:2] for e in self.voxel_extents()[:NUM_STAGES]]

    def to_dict(self) -> dict:
        return {
            "input_extents": list(self.input_extents),
            "stage_channels": list(self.stage_channels),
            "bev_blocks": list(self.bev_blocks),
            "reduction_stage1": self.reduction_stage1.value,
            "reduction_stages2to4": self.reduction_stages2to4.value,
            "msr_stages": sorted(self.msr_stages),
            "fuse_before_blocks": self.fuse_before_blocks,
            "downsample_stride": list(self.downsample_stride),
            "downsample_kernel": list(self.downsample_kernel),
            "baseline_pillar": self.baseline_pillar,
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        try:
            for key in ("reduction_stage1", "reduction_stages2to4"):
                if key in d:
                    d[key] = ReductionKind(d[key])
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid backbone config: {e}")


@dataclass
class BackboneState:
    """Parameters of a built backbone. Voxel-branch fields are empty for the pillar baseline."""

    config: BackboneConfig
    lift: Optional[ConvKernel] = None
    voxel_subm: List[ConvKernel] = field(default_factory=list)
    voxel_down: List[ConvKernel] = field(default_factory=list)
    reductions: Dict[int, Reduction] = field(default_factory=dict)
    pillar_stem: Optional[ConvKernel] = None
    bev_down: Dict[int, ConvKernel] = field(default_factory=dict)
    bev_blocks: List[List[Tuple[ConvKernel, ConvKernel]]] = field(default_factory=list)
    head: Optional[ConvKernel] = None  # 1x1 regression head, attached by trainlite

    def kernels(self) -> List[ConvKernel]:
        """Every learnable kernel in a fixed order"""
        out = [self.lift] if self.lift is not None else []
        for subm, down in zip(self.voxel_subm, self.voxel_down):
            out += [subm, down]
        out += [r.kernel for _, r in sorted(self.reductions.items()) if r.kernel is not None]
        if self.pillar_stem is not None:
            out.append(self.pillar_stem)
        for stage, blocks in enumerate(self.bev_blocks, start=1):
            if stage in self.bev_down:
                out.append(self.bev_down[stage])
            for k1, k2 in blocks:
                out += [k1, k2]
        if self.head is not None:
            out.append(self.head)
        return out

    def kernel(self, name: str) -> ConvKernel:
        for k in self.kernels():
            if k.name == name:
                return k
        raise KeyError(name)

    @property
    def num_residual_blocks(self) -> int:
        return sum(len(b) for b in self.bev_blocks)

    def parameter_count(self) -> int:
        return parameter_count(self)


def parameter_count(state: BackboneState) -> int:
    return sum(k.num_parameters for k in state.kernels())


def build(cfg: BackboneConfig, seed: int = 0) -> BackboneState:
    """
    Initialize every kernel of the backbone described by cfg.

    :param cfg: backbone config
    :param seed: same seed gives identical parameters
    :return: BackboneState
    """
    rng = np.random.default_rng(seed)
    c = cfg.stage_channels
    state = BackboneState(config=cfg)
    voxel_extents = cfg.voxel_extents()

    if cfg.baseline_pillar:
        state.reductions[1] = Reduction(ReductionKind.MaxPool)
        state.pillar_stem = ConvKernel.init("pillar.stem", (1, 1), cfg.input_channels, c[0], rng)
    else:
        state.lift = ConvKernel.init("lift", (1, 1, 1), cfg.input_channels, c[0], rng)
        for l in range(1, NUM_STAGES + 1):
            c_in = c[l - 1]
            c_out = c[l] if l < NUM_STAGES else c[-1]
            state.voxel_subm.append(ConvKernel.init(f"voxel{l}.subm", (3, 3, 3), c_in, c_in, rng))
            state.voxel_down.append(ConvKernel.init(f"voxel{l}.down", cfg.downsample_kernel, c_in, c_out, rng))
        state.reductions[1] = Reduction.create(cfg.reduction_stage1, c[0], voxel_extents[0][2], rng, "reduce1")
        for l in sorted(cfg.msr_stages):
            state.reductions[l] = Reduction.create(cfg.reduction_stages2to4, c[l - 1], voxel_extents[l - 1][2], rng,
                                                   f"reduce{l}")

    for l in range(1, NUM_STAGES + 1):
        if l > 1:
            state.bev_down[l] = ConvKernel.init(f"bev{l}.down", (3, 3), c[l - 2], c[l - 1], rng)
        state.bev_blocks.append([
            (ConvKernel.init(f"bev{l}.block{b}.conv1", (3, 3), c[l - 1], c[l - 1], rng),
             ConvKernel.init(f"bev{l}.block{b}.conv2", (3, 3), c[l - 1], c[l - 1], rng))
            for b in range(cfg.bev_blocks[l - 1])
        ])
    _check_fusion_channels(state)
    log.debug(f"built backbone with {parameter_count(state)} parameters, {state.num_residual_blocks} residual blocks")
    return state


def _check_fusion_channels(state: BackboneState):
    """The reduced map of stage l must match the BEV channels of stage l"""
    c = state.config.stage_channels
    if state.config.baseline_pillar:
        return
    for l, r in state.reductions.items():
        # pooling and SDR keep the channels of the tensor they reduce
        out = r.kernel.out_channels if r.kind.needs_kernel and not r.kind.is_sdr else c[l - 1]
        if out != c[l - 1]:
            raise ConfigError(f"stage {l} reduction yields {out} channels, BEV stage expects {c[l - 1]}")


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass"""

    voxels: List[SparseVoxelTensor]
    reduced: Dict[int, DenseBevMap]
    bev_down: Dict[int, DenseBevMap]
    bev: List[DenseBevMap]
    weights: Optional[ReductionWeights] = None

    @property
    def output(self) -> DenseBevMap:
        return self.bev[-1]


def _run_blocks(m: DenseBevMap, blocks: Sequence[Tuple[ConvKernel, ConvKernel]],
                tape: Optional[GradTape]) -> DenseBevMap:
    for k1, k2 in blocks:
        m = residual_block2d(m, k1, k2, tape)
    return m


def _bev_stage(state: BackboneState, l: int, y_prev: DenseBevMap, reduced: Optional[DenseBevMap],
               trace: ForwardTrace, tape: Optional[GradTape]) -> DenseBevMap:
    cfg = state.config
    down = conv2d(y_prev, state.bev_down[l], stride=cfg.bev_stride, tape=tape)
    trace.bev_down[l] = down
    if reduced is None:
        return _run_blocks(down, state.bev_blocks[l - 1], tape)
    assert reduced.shape == down.shape, f"stage {l}: reduced map {reduced.shape} vs BEV map {down.shape}"
    if cfg.fuse_before_blocks:
        return _run_blocks(add(reduced, down, tape), state.bev_blocks[l - 1], tape)
    return add(_run_blocks(down, state.bev_blocks[l - 1], tape), reduced, tape)


def _check_input(state: BackboneState, t0: SparseVoxelTensor):
    cfg = state.config
    if t0.channels != cfg.input_channels:
        raise ShapeError(f"input has {t0.channels} channels, backbone expects {cfg.input_channels}")
    if t0.geometry.extents != cfg.input_extents:
        raise ShapeError(f"input extents {t0.geometry.extents} != configured {cfg.input_extents}")


def forward_trace(state: BackboneState, t0: SparseVoxelTensor, tape: Optional[GradTape] = None) -> ForwardTrace:
    """Forward pass keeping every stage's voxel tensor, reduced map and BEV map"""
    if state.config.baseline_pillar:
        return _pillar_trace(state, t0, tape)
    _check_input(state, t0)
    cfg = state.config
    x = sparse_relu(submanifold_conv3d(t0, state.lift, tape), tape)
    voxels = [x]
    for subm, down in zip(state.voxel_subm, state.voxel_down):
        x = sparse_relu(submanifold_conv3d(x, subm, tape), tape)
        x = sparse_relu(strided_sparse_conv3d(x, down, cfg.downsample_stride, tape), tape)
        voxels.append(x)

    reduced1, weights = reduce(voxels[0], state.reductions[1], tape)
    trace = ForwardTrace(voxels=voxels, reduced={1: reduced1}, bev_down={}, bev=[], weights=weights)
    y = _run_blocks(reduced1, state.bev_blocks[0], tape)
    trace.bev.append(y)
    for l in range(2, NUM_STAGES + 1):
        reduced = None
        if l in state.reductions:
            reduced, _ = reduce(voxels[l - 1], state.reductions[l], tape)
            trace.reduced[l] = reduced
        y = _bev_stage(state, l, y, reduced, trace, tape)
        trace.bev.append(y)
    return trace


def forward(state: BackboneState, t0: SparseVoxelTensor, tape: Optional[GradTape] = None) -> DenseBevMap:
    """
    Stage-4 BEV map of the backbone.

    :param state: built backbone
    :param t0: voxelized input, ``input_channels`` channels over ``input_extents``
    :param tape: optional GradTape recording every op
    :return: DenseBevMap of shape bev_extents()[-1] + (stage_channels[-1],)
    """
    return forward_trace(state, t0, tape).output


def _pillar_trace(state: BackboneState, t0: SparseVoxelTensor, tape: Optional[GradTape]) -> ForwardTrace:
    _check_input(state, t0)
    pooled, weights = reduce(t0, state.reductions[1], tape)
    y = conv2d(pooled, state.pillar_stem, tape=tape)
    trace = ForwardTrace(voxels=[t0], reduced={1: pooled}, bev_down={}, bev=[], weights=weights)
    y = _run_blocks(y, state.bev_blocks[0], tape)
    trace.bev.append(y)
    for l in range(2, NUM_STAGES + 1):
        y = _bev_stage(state, l, y, None, trace, tape)
        trace.bev.append(y)
    return trace


def forward_baseline_pillar(state: BackboneState, t0: SparseVoxelTensor,
                            tape: Optional[GradTape] = None) -> DenseBevMap:
    """Pillar baseline: MaxPool over the height, a 1x1 stem, then the BEV branch alone"""
    if not state.config.baseline_pillar:
        raise ConfigError("forward_baseline_pillar needs a state built with baseline_pillar=True")
    return _pillar_trace(state, t0, tape).output


def msr_ablation_config(stages_enabled, base: Optional[BackboneConfig] = None,
                        input_extents: Sequence[int] = (32, 32, 16)) -> BackboneConfig:
    """Config fusing the voxel branch into the BEV branch only at the given stages"""
    base = base if base is not None else BackboneConfig(input_extents=tuple(input_extents))
    return replace(base, msr_stages=frozenset(stages_enabled), baseline_pillar=False)


def ablation_ladder(base: Optional[BackboneConfig] = None,
                    input_extents: Sequence[int] = (32, 32, 16)) -> List[Tuple[str, BackboneConfig]]:
    """The pillar baseline, then SDR alone, then fusion added one stage at a time"""
    base = base if base is not None else BackboneConfig(input_extents=tuple(input_extents))
    return [
        ("pillar", replace(base, baseline_pillar=True, msr_stages=frozenset())),
        ("sdr", msr_ablation_config(set(), base)),
        ("sdr+msr2", msr_ablation_config({2}, base)),
        ("sdr+msr23", msr_ablation_config({2, 3}, base)),
        ("sdr+msr234", msr_ablation_config({2, 3, 4}, base)),
    ]
