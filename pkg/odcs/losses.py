"""
Training objectives
===================

- :func:`dice_loss`: one minus the generalized dice between target and prediction
- :func:`mfm_loss`: multi-scale feature matching, one dice term per extractor channel
- :func:`total_loss`: ``mfm_loss + lambda * dice_loss``

Targets and predictions are single-channel maps in the continuous [-1, 1]
encoding produced by :func:`odcs.raster.mask_to_target`.
"""

from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .network import FeatureExtractor
from .tensor import Tensor, square, tensor_sum

DEFAULT_LAMBDA = 150.0
DEFAULT_SMOOTH = 1e-6


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = DEFAULT_LAMBDA
    smooth: float = DEFAULT_SMOOTH

    def __post_init__(self):
        if not self.lambda_ >= 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lambda_}")
        if not self.smooth > 0:
            raise ConfigError(f"smooth must be positive, got {self.smooth}")


@dataclass
class LossBreakdown:
    """The three loss values of one evaluation; ``total`` is the one to back-propagate"""

    dice: Tensor
    mfm: Tensor
    total: Tensor

    def as_floats(self):
        return self.dice.item(), self.mfm.item(), self.total.item()


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def generalized_dice(a: Tensor, b: Tensor, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """2·Σ(a·b) / (Σa² + Σb² + smooth) over all elements"""
    _check_same_shape("generalized_dice", a, b)
    return 2.0 * (a * b).sum() / (square(a).sum() + square(b).sum() + smooth)


def channel_dice(a: Tensor, b: Tensor, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """Generalized dice per channel of two N, C, H, W tensors, reduced over N, H and W"""
    _check_same_shape("channel_dice", a, b)
    if a.ndim != 4:
        raise DimensionError(f"channel_dice: expected N, C, H, W tensors, got shape {a.shape}")
    axes = (0, 2, 3)
    num = 2.0 * tensor_sum(a * b, axes)
    den = tensor_sum(square(a), axes) + tensor_sum(square(b), axes) + smooth
    return num / den


def dice_loss(y: Tensor, yhat: Tensor, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    return 1.0 - generalized_dice(y, yhat, smooth)


def mfm_loss(x: Tensor, y: Tensor, yhat: Tensor, f: FeatureExtractor,
             smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """
    Sum over extractor layers and channels of ``1 - dice(Y_c, Ŷ_c)``, where the
    features are extracted from ``(x, y)`` and ``(x, yhat)``.

    Batch norm inside the extractor normalizes both branches with the batch
    statistics of the ground-truth branch (see
    :meth:`FeatureExtractor.forward_pair`), held constant for differentiation.
    """
    _check_same_shape("mfm_loss", y, yhat)
    real, fake = f.forward_pair(x, y, yhat)

    loss = None
    for y_feat, yhat_feat in zip(real, fake):
        per_channel = channel_dice(y_feat, yhat_feat, smooth)
        term = per_channel.size - per_channel.sum()
        loss = term if loss is None else loss + term
    return loss


def compute_losses(x: Tensor, y: Tensor, yhat: Tensor, f: FeatureExtractor,
                   cfg: LossConfig = LossConfig()) -> LossBreakdown:
    dice = dice_loss(y, yhat, cfg.smooth)
    mfm = mfm_loss(x, y, yhat, f, cfg.smooth)
    return LossBreakdown(dice=dice, mfm=mfm, total=mfm + cfg.lambda_ * dice)


def total_loss(x: Tensor, y: Tensor, yhat: Tensor, f: FeatureExtractor,
               cfg: LossConfig = LossConfig()) -> Tensor:
    return compute_losses(x, y, yhat, f, cfg).total
