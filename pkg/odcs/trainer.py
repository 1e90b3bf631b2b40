"""
Training loop, checkpoint-based evaluation and prediction.
"""

import csv
import logging
import math
import shutil
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config, parse_config
from .data import (
    BrightestRegionDetector,
    RoiBox,
    RoiDetector,
    SegmentationDataset,
    crop_roi,
    detect_roi,
    load_manifest,
    paste_mask,
)
from .errors import CheckpointError, ManifestError, NonFiniteError
from .losses import LossBreakdown, compute_losses
from .metrics import EvalReport, evaluate
from .network import FeatureExtractor, Generator
from .optim import Adam
from .raster import (
    FundusImage,
    MaskClass,
    PathLike,
    SegmentationMask,
    image_to_input,
    read_image,
    read_mask,
    target_to_mask,
)
from .tensor import Graph, Tensor, backward

logger = logging.getLogger(__name__)

LOSS_LOG = "loss_log.csv"
LOSS_LOG_HEADER = ("step", "l_dice", "l_mfm", "l_total")
LATEST = "latest.odcs"

# Overlay tints (RGB)
DISC_TINT = np.array([0, 255, 0], dtype=np.uint16)
CUP_TINT = np.array([0, 0, 255], dtype=np.uint16)


@dataclass
class StepResult:
    step: int
    dice: float
    mfm: float
    total: float


def build_networks(config: TrainConfig) -> Tuple[Generator, FeatureExtractor]:
    generator = Generator(config.generator_config())
    extractor = FeatureExtractor(config.extractor_config())
    extractor.requires_grad_(config.extractor_trainable)
    return generator, extractor


def _prefixed(prefix: str, items) -> "OrderedDict":
    return OrderedDict((f"{prefix}.{k}", v) for k, v in items.items())


class Trainer:
    """
    Generator training against ``mfm_loss + lambda * dice_loss``.

    Example:
        >>> trainer = Trainer(load_config("train.cfg"))
        >>> trainer.fit()
    """

    def __init__(self, config: TrainConfig, dataset: Optional[SegmentationDataset] = None,
                 progress: bool = True):
        self.config = config
        self.progress = progress
        self.generator, self.extractor = build_networks(config)
        params = _prefixed("generator", self.generator.named_parameters())
        if config.extractor_trainable:
            params.update(_prefixed("extractor", self.extractor.named_parameters()))
        self.optimizer = Adam(params, lr=config.lr, beta1=config.beta1,
                              beta2=config.beta2, eps=config.eps)
        self.loss_config = config.loss_config()
        if dataset is None:
            manifest = load_manifest(config.train_manifest)
            dataset = SegmentationDataset(
                manifest, config.input_size, config.batch_size, seed=config.seed,
                augment_config=config.augment_config())
        self.dataset = dataset
        self.checkpoint_dir = Path(config.checkpoint_dir)
        self.step = 0
        self.next_epoch = 0
        self.next_batch = 0
        self._resumed = False

    @property
    def loss_log_path(self) -> Path:
        return self.checkpoint_dir / LOSS_LOG

    # State

    def state(self) -> Checkpoint:
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for prefix, net in (("generator", self.generator), ("extractor", self.extractor)):
            for name, t in net.named_parameters().items():
                tensors[f"{prefix}.{name}"] = t.data
            for name, buf in net.named_buffers().items():
                tensors[f"{prefix}.{name}"] = buf
        return Checkpoint(
            config_text=dump_config(self.config), step=self.step, next_epoch=self.next_epoch,
            next_batch=self.next_batch, seed=self.config.seed, tensors=tensors,
            optimizer=self.optimizer.state_dict(),
        )

    def restore(self, ckpt: Checkpoint):
        if ckpt.config_text != dump_config(self.config):
            logger.warning("Checkpoint was written with a different configuration; continuing with the current one")
        try:
            for prefix, net in (("generator", self.generator), ("extractor", self.extractor)):
                section = ckpt.section(prefix)
                net.load_parameters(section)
                net.load_buffers(section)
            self.optimizer.load_state_dict(ckpt.optimizer)
        except KeyError as e:
            raise CheckpointError(f"checkpoint is missing tensor {e}") from e
        self.step = ckpt.step
        self.next_epoch = ckpt.next_epoch
        self.next_batch = ckpt.next_batch
        self._resumed = True
        logger.info("Resumed at step %d (epoch %d, batch %d)", self.step, self.next_epoch, self.next_batch)

    def resume(self, path: PathLike):
        self.restore(load_checkpoint(path))
        self._truncate_loss_log()

    def save(self, name: str) -> Path:
        path = self.checkpoint_dir / name
        save_checkpoint(self.state(), path)
        if name != LATEST:
            shutil.copyfile(path, self.checkpoint_dir / LATEST)
        return path

    # Loss log

    def _start_loss_log(self):
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        if self._resumed and self.loss_log_path.exists():
            return
        with open(self.loss_log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOSS_LOG_HEADER)

    def _truncate_loss_log(self):
        path = self.loss_log_path
        if not path.exists():
            return
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= self.step]
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(kept)

    def _log_step(self, result: StepResult):
        with open(self.loss_log_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [result.step, repr(result.dice), repr(result.mfm), repr(result.total)])

    # Training

    def train_step(self, x: Tensor, y: Tensor) -> StepResult:
        self.generator.train()
        with Graph(debug=self.config.debug) as graph:
            yhat = self.generator.forward(x)
            losses: LossBreakdown = compute_losses(x, y, yhat, self.extractor, self.loss_config)
        dice, mfm, total = losses.as_floats()
        if not math.isfinite(total):
            raise NonFiniteError(
                "total_loss", f"non-finite loss at step {self.step + 1} "
                              f"(dice={dice}, mfm={mfm}); last good checkpoint kept")
        self.optimizer.zero_grad()
        backward(losses.total, graph)
        self.optimizer.step()
        self.step += 1
        return StepResult(self.step, dice, mfm, total)

    def _cap_reached(self) -> bool:
        return self.config.max_steps > 0 and self.step >= self.config.max_steps

    def fit(self) -> List[StepResult]:
        cfg = self.config
        logger.info("Generator: %d parameters, input %dx%d, width scale %s",
                    self.generator.parameter_count(), cfg.input_size, cfg.input_size, cfg.width_scale)
        logger.info("Optimizer: Adam lr=%s beta1=%s beta2=%s eps=%s; lambda=%s",
                    cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.lambda_)
        logger.info("Data: %d samples, %d batches of %d per epoch, %d epochs",
                    len(self.dataset), self.dataset.num_batches(),
                    self.dataset.effective_batch_size, cfg.epochs)
        self._start_loss_log()

        results: List[StepResult] = []
        per_epoch = self.dataset.num_batches()
        total = cfg.epochs * per_epoch
        if cfg.max_steps:
            total = min(total, cfg.max_steps)
        bar = tqdm(total=total, initial=min(self.step, total), disable=not self.progress,
                   desc="train", unit="step")
        try:
            while self.next_epoch < cfg.epochs and not self._cap_reached():
                epoch = self.next_epoch
                epoch_results = []
                for batch in self.dataset.batches(epoch, start=self.next_batch):
                    result = self.train_step(batch.x, batch.y)
                    self.next_batch += 1
                    self._log_step(result)
                    epoch_results.append(result)
                    bar.update(1)
                    bar.set_postfix(dice=f"{result.dice:.4f}", total=f"{result.total:.4f}")
                    if self._cap_reached():
                        break
                results.extend(epoch_results)
                if self.next_batch >= per_epoch:
                    self.next_epoch, self.next_batch = epoch + 1, 0
                    if epoch_results:
                        logger.info("Epoch %d: mean l_dice %.6f, l_mfm %.6f, l_total %.6f", epoch + 1,
                                    *np.mean([[r.dice, r.mfm, r.total] for r in epoch_results], axis=0))
                    self.save(f"epoch_{epoch + 1:04d}.odcs")
                else:
                    self.save(LATEST)
        finally:
            bar.close()
        return results


# Inference


def load_generator(ckpt: Checkpoint) -> Tuple[TrainConfig, Generator]:
    config = parse_config(ckpt.config_text)
    generator = Generator(config.generator_config())
    section = ckpt.section("generator")
    try:
        generator.load_parameters(section)
        generator.load_buffers(section)
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing generator tensor {e}") from e
    return config, generator.eval()


def predict_mask(generator: Generator, image: FundusImage) -> SegmentationMask:
    """Eval-mode prediction for one ROI image already at the network's input size"""
    x = Tensor(image_to_input(image)[None])
    out = generator.eval().forward(x)
    return target_to_mask(out.numpy()[0])


def evaluate_checkpoint(ckpt_path: PathLike, manifest_path: PathLike,
                        detector: Optional[RoiDetector] = None) -> EvalReport:
    """Predict every manifest record inside its ROI and score against the cropped ground truth"""
    manifest = load_manifest(manifest_path)
    if len(manifest) == 0:
        raise ManifestError(f"{manifest_path}: manifest has no records")
    config, generator = load_generator(load_checkpoint(ckpt_path))
    preds, truths = OrderedDict(), OrderedDict()
    for record in manifest:
        image = read_image(record.image)
        mask = read_mask(record.mask)
        box = record.roi if record.roi is not None else detect_roi(image, detector)
        roi_image, roi_mask = crop_roi(image, mask, box, config.input_size)
        if record.id in truths:
            raise ManifestError(f"{manifest_path}: duplicate image id {record.id!r}")
        truths[record.id] = roi_mask
        preds[record.id] = predict_mask(generator, roi_image)
    return evaluate(preds, truths)


@dataclass
class Prediction:
    mask: SegmentationMask
    roi: RoiBox
    overlay: FundusImage


def render_overlay(image: FundusImage, mask: SegmentationMask) -> FundusImage:
    """Blend disc pixels 50% with green and cup pixels 50% with blue"""
    pixels = image.pixels.astype(np.uint16)
    disc = mask.labels == MaskClass.DISC
    cup = mask.labels == MaskClass.CUP
    pixels[disc] = (pixels[disc] + DISC_TINT) // 2
    pixels[cup] = (pixels[cup] + CUP_TINT) // 2
    return FundusImage(pixels.astype(np.uint8))


def predict_image(ckpt_path: PathLike, image_path: PathLike, roi: Optional[RoiBox] = None,
                  detector: Optional[RoiDetector] = None) -> Prediction:
    """Segment a full image: detect (or take) the ROI, predict, paste back at source resolution"""
    config, generator = load_generator(load_checkpoint(ckpt_path))
    image = read_image(image_path)
    box = roi if roi is not None else detect_roi(image, detector or BrightestRegionDetector())
    roi_image, _ = crop_roi(image, None, box, config.input_size)
    mask = paste_mask(predict_mask(generator, roi_image), box, image.width, image.height)
    return Prediction(mask=mask, roi=box, overlay=render_overlay(image, mask))
