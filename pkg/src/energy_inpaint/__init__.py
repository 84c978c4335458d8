"""Blind image inpainting with a learned energy minimised by gradient descent."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    DatasetSplit,
    ImagePair,
    apply_center_mask,
    apply_half_mask,
    load_idx,
    load_image_dir,
    make_masker,
    make_split,
)
from .energy_net import EnergyNetConfig, EnergyNetParams, energy, init_params, zeros_params
from .grid import export_grid
from .inference import InferenceConfig, inpaint, mean_image, minimize_energy
from .metrics import EvalReport, evaluate, mean_image_baseline, mse255, psnr
from .training import AdamState, TrainConfig, train

__all__ = [
    "AdamState",
    "Checkpoint",
    "DatasetSplit",
    "EnergyNetConfig",
    "EnergyNetParams",
    "EvalReport",
    "ImagePair",
    "InferenceConfig",
    "TrainConfig",
    "apply_center_mask",
    "apply_half_mask",
    "energy",
    "evaluate",
    "export_grid",
    "init_params",
    "inpaint",
    "load_checkpoint",
    "load_idx",
    "load_image_dir",
    "make_masker",
    "make_split",
    "mean_image",
    "mean_image_baseline",
    "minimize_energy",
    "mse255",
    "psnr",
    "save_checkpoint",
    "train",
    "zeros_params",
]
