"""
Getting and loading parameters for mdrnet

Parameters live in a YAML file, by default ``mdrnet_params.yml`` at the root of the repository.
A ``mdrnet_params_dev.yml`` next to it takes precedence (development machine).
"""
import copy
import logging
import os
from pathlib import Path
from typing import Optional, Union

import yaml

import mdrnet
from mdrnet.errors import ConfigError

log = logging.getLogger("mdrnet")

# Add new keys to this, and a getter below
DEFAULT_PARAMS = {
    "voxelize": {
        "voxel_size": [0.5, 0.5, 0.5],  # m
        "range_min": [0.0, -8.0, -5.0],  # m
        "range_max": [16.0, 8.0, 3.0],  # m
        "max_points_per_voxel": 32,
    },
    "backbone": {
        "stage_channels": [16, 32, 64, 128],
        "bev_blocks": [1, 2, 2, 2],
        "reduction_stage1": "SdrSoftmax",
        "reduction_stages2to4": "FullHeightSparseConv",
        "msr_stages": [2, 3, 4],
        "fuse_before_blocks": True,
    },
    "train": {
        "learning_rate": 0.01,
        "momentum": 0.9,
        "steps": 200,
    },
    "bench": {
        "reps": 5,
        "warmup": 2,
    },
}


def get_params_file_path() -> Path:
    """Default parameter file, preferring the development override when it exists"""
    root = Path(mdrnet.__file__).parents[1]
    if (root / "mdrnet_params_dev.yml").exists():
        log.info("mdrnet_params_dev.yml file exists, assuming development machine, and pulling parameters from this file.")
        return root / "mdrnet_params_dev.yml"
    return root / "mdrnet_params.yml"


def ensure_all_keys_present(loaded_params: dict) -> dict:
    """
    Ensures all sections and keys of DEFAULT_PARAMS are present, filling the missing ones
    with their default values
    """
    for section, defaults in DEFAULT_PARAMS.items():
        if section not in loaded_params or loaded_params[section] is None:
            log.warning(f"Section {section} missing from params file, using defaults")
            loaded_params[section] = copy.deepcopy(defaults)
            continue
        if not isinstance(loaded_params[section], dict):
            raise ConfigError(f"Section {section} must be a mapping, got {loaded_params[section]!r}")
        for k, v in defaults.items():
            if k not in loaded_params[section]:
                log.warning(f"Key {section}.{k} missing from params file, using default {v}")
                loaded_params[section][k] = copy.deepcopy(v)
    return loaded_params


def load_params_file(fpath: Optional[Union[str, Path]] = None) -> dict:
    """load_params_file loads a YAML parameter file, the default one if fpath is None.
    Falls back to DEFAULT_PARAMS if the default file does not exist.

    :param fpath: path to a YAML file, defaults to None
    :type fpath: str or Path, optional
    :return: parameters with every known key present
    :rtype: dict
    """
    if fpath is None:
        fpath = get_params_file_path()
        if not fpath.exists():
            log.warning(f"Could not find params file {fpath}, using defaults")
            return copy.deepcopy(DEFAULT_PARAMS)
    fpath = Path(fpath)
    log.debug(f"fpath from load_params_file: {fpath}")
    if not fpath.exists():
        raise FileNotFoundError(f"params file not found: {fpath}")
    with open(fpath, "r") as f:
        try:
            out = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse params file {fpath}: {e}")
    if not isinstance(out, dict):
        raise ConfigError(f"params file {fpath} must hold a mapping")
    return ensure_all_keys_present(out)


def write_params_file(fpath: Union[str, Path], data: dict = None) -> dict:
    """Write data (DEFAULT_PARAMS if None) to fpath as YAML"""
    data = copy.deepcopy(DEFAULT_PARAMS) if data is None else data
    with open(fpath, "w") as f:
        log.info(f"Writing params to {fpath}")
        yaml.safe_dump(data, f, default_flow_style=None, sort_keys=False)
    return data


def get_voxelize_config(params: dict):
    from mdrnet.voxelizer import VoxelizeConfig

    p = params["voxelize"]
    try:
        return VoxelizeConfig.from_ranges(
            voxel_size=p["voxel_size"],
            range_min=p["range_min"],
            range_max=p["range_max"],
            max_points_per_voxel=p["max_points_per_voxel"],
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid voxelize section: {e}")


def get_backbone_config(params: dict, input_extents):
    from mdrnet.backbone import BackboneConfig
    from mdrnet.reduce import ReductionKind

    p = params["backbone"]
    try:
        return BackboneConfig(
            input_extents=tuple(input_extents),
            stage_channels=tuple(p["stage_channels"]),
            bev_blocks=tuple(p["bev_blocks"]),
            reduction_stage1=ReductionKind[p["reduction_stage1"]],
            reduction_stages2to4=ReductionKind[p["reduction_stages2to4"]],
            msr_stages=frozenset(p["msr_stages"]),
            fuse_before_blocks=bool(p["fuse_before_blocks"]),
        )
    except KeyError as e:
        raise ConfigError(f"Unknown reduction kind {e} in backbone section")


def get_sgd_config(params: dict, seed: int = 0, **overrides):
    from mdrnet.trainlite import SgdConfig

    p = dict(params["train"])
    p.update({k: v for k, v in overrides.items() if v is not None})
    return SgdConfig(
        learning_rate=float(p["learning_rate"]),
        momentum=float(p["momentum"]),
        steps=int(p["steps"]),
        seed=int(seed),
    )


def get_num_threads() -> int:
    """Thread cap from the MDRNET_THREADS environment variable, 0 or unset is os.cpu_count()"""
    value = os.environ.get("MDRNET_THREADS", "").strip()
    if not value:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"MDRNET_THREADS must be an integer, got {value!r}")
    if n < 0:
        raise ConfigError(f"MDRNET_THREADS must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)
