"""
odcs - Optic Disc and Cup Segmentation
======================================

A U-shaped segmentation generator trained with a dice content loss and a
multi-scale feature-matching loss, on top of a small numpy autodiff engine.

Quick Start:
    >>> from odcs import Generator, GeneratorConfig, Tensor
    >>> import numpy as np
    >>> g = Generator(GeneratorConfig(width_scale=1/8, input_size=64)).eval()
    >>> g.forward(Tensor(np.zeros((1, 3, 64, 64)))).shape
    (1, 1, 64, 64)

Features:
    - Reverse-mode differentiation for convolutions, batch norm and activations
    - Generator and conditioned feature extractor at any width scale
    - Dice, feature-matching and total losses; Adam optimizer
    - PPM/PGM I/O, ROI cropping, augmentation and synthetic fundus data
    - Dice and vertical cup-to-disc ratio evaluation
    - Deterministic, resumable training with binary checkpoints
"""

from .config import TrainConfig, load_config
from .errors import OdcsError
from .losses import LossConfig, dice_loss, mfm_loss, total_loss
from .metrics import EvalReport, evaluate, hard_dice, vertical_cdr
from .network import FeatureExtractor, FeatureExtractorConfig, Generator, GeneratorConfig
from .optim import Adam
from .raster import FundusImage, MaskClass, SegmentationMask, read_raster, write_raster
from .tensor import Graph, Tensor, backward
from .trainer import Trainer
from .version import __version__

__author__ = "odcs contributors"
__all__ = [
    "Adam",
    "EvalReport",
    "FeatureExtractor",
    "FeatureExtractorConfig",
    "FundusImage",
    "Generator",
    "GeneratorConfig",
    "Graph",
    "LossConfig",
    "MaskClass",
    "OdcsError",
    "SegmentationMask",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "backward",
    "dice_loss",
    "evaluate",
    "hard_dice",
    "load_config",
    "mfm_loss",
    "read_raster",
    "total_loss",
    "vertical_cdr",
    "write_raster",
]
