"""Latent-space morphing of voxelized heart shapes with a VAE classifier."""

from .estimator import LatentMorphClassifier, check_voxels
from .manifold import LaplacianEigenmaps, embed_with_trace, laplacian_eigenmaps
from .navigation import NavigationTrace, navigate
from .shapes import VoxelSample, generate_sample, make_dataset, volume_metrics
from .tensor import ContractError, ShapeError, Tape, Tensor
from .training import TrainConfig, TrainState, train
from .vae import ModelConfig, VAENet, preset

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "LaplacianEigenmaps",
    "LatentMorphClassifier",
    "ModelConfig",
    "NavigationTrace",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "VAENet",
    "VoxelSample",
    "check_voxels",
    "embed_with_trace",
    "generate_sample",
    "laplacian_eigenmaps",
    "make_dataset",
    "navigate",
    "preset",
    "train",
    "volume_metrics",
]
