"""
Datasets: manifests, ROI cropping, augmentation and synthetic fundus samples
===========================================================================

Manifest format (one record per line, ``#`` starts a comment line)::

    images/0001.ppm,masks/0001.pgm
    images/0002.ppm,masks/0002.pgm,310,280,420,420

Relative paths resolve against the manifest's directory. A record with an
explicit ``x,y,w,h`` box skips ROI detection.
"""

import logging
import math
import os
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, List, Optional, Protocol, Tuple

import cv2
import numpy as np

from .errors import ConfigError, ContractError, ManifestError, RoiError
from .raster import (
    FundusImage,
    MaskClass,
    PathLike,
    SegmentationMask,
    image_to_input,
    mask_to_target,
    read_image,
    read_mask,
    write_raster,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

THREADS_ENV = "ODCS_THREADS"


@dataclass(frozen=True)
class RoiBox:
    """Region of interest in source-pixel coordinates"""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise RoiError(f"ROI width and height must be positive, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise RoiError(f"ROI origin must be non-negative, got ({self.x}, {self.y})")

    @classmethod
    def parse(cls, text: str) -> "RoiBox":
        """Parse ``x,y,w,h``"""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise RoiError(f"ROI must be x,y,w,h, got {text!r}")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError as e:
            raise RoiError(f"ROI must be four integers, got {text!r}") from e

    def __str__(self):
        return f"{self.x},{self.y},{self.w},{self.h}"

    @property
    def center(self) -> Tuple[float, float]:
        """(x, y) centre"""
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def check_within(self, width: int, height: int):
        if self.x + self.w > width or self.y + self.h > height:
            raise RoiError(f"ROI {self} extends outside the {width}x{height} image")


# Manifests


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    mask: Path
    roi: Optional[RoiBox] = None

    @property
    def id(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    records: List[ManifestRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> ManifestRecord:
        return self.records[index]


def load_manifest(path: PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e

    base = path.parent
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (2, 6):
            raise ManifestError(
                f"{path}:{lineno}: expected image,mask[,x,y,w,h], got {len(parts)} fields")
        image, mask = (base / parts[0]), (base / parts[1])
        try:
            roi = RoiBox.parse(",".join(parts[2:])) if len(parts) == 6 else None
        except RoiError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from e
        if check_files:
            for p in (image, mask):
                if not p.is_file():
                    raise ManifestError(f"{path}:{lineno}: file not found: {p}")
        records.append(ManifestRecord(image, mask, roi))
    logger.debug("Loaded %d records from %s", len(records), path)
    return DatasetManifest(records)


def write_manifest(manifest: DatasetManifest, path: PathLike):
    """Write records with paths relative to the manifest's directory where possible"""
    path = Path(path)
    lines = []
    for r in manifest:
        fields = [_relative(r.image, path.parent), _relative(r.mask, path.parent)]
        if r.roi is not None:
            fields.append(str(r.roi))
        lines.append(",".join(fields))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _relative(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


# ROI detection and cropping


def crop_roi(image: FundusImage, mask: Optional[SegmentationMask], box: RoiBox,
             out_size: int) -> Tuple[FundusImage, Optional[SegmentationMask]]:
    """
    Crop ``box`` and resample it to ``out_size``×``out_size``: bilinear for the
    image, nearest-neighbour for the mask.
    """
    box.check_within(image.width, image.height)
    if mask is not None and mask.shape != (image.height, image.width):
        raise RoiError(f"mask {mask.shape} and image {(image.height, image.width)} differ in size")
    if out_size <= 0:
        raise RoiError(f"output size must be positive, got {out_size}")

    rows, cols = slice(box.y, box.y + box.h), slice(box.x, box.x + box.w)
    pixels = np.ascontiguousarray(image.pixels[rows, cols])
    cropped = FundusImage(cv2.resize(pixels, (out_size, out_size), interpolation=cv2.INTER_LINEAR))
    if mask is None:
        return cropped, None
    labels = np.ascontiguousarray(mask.labels[rows, cols])
    return cropped, SegmentationMask(
        cv2.resize(labels, (out_size, out_size), interpolation=cv2.INTER_NEAREST))


def paste_mask(mask: SegmentationMask, box: RoiBox, width: int, height: int) -> SegmentationMask:
    """Resample an ROI mask back onto a ``width``×``height`` canvas of background"""
    box.check_within(width, height)
    labels = np.full((height, width), MaskClass.BACKGROUND, dtype=np.uint8)
    labels[box.y:box.y + box.h, box.x:box.x + box.w] = cv2.resize(
        mask.labels, (box.w, box.h), interpolation=cv2.INTER_NEAREST)
    return SegmentationMask(labels)


def centered_box(width: int, height: int, side_fraction: float = 0.4) -> RoiBox:
    side = max(1, int(round(side_fraction * min(width, height))))
    return RoiBox((width - side) // 2, (height - side) // 2, side, side)


class RoiDetector(Protocol):
    def detect(self, image: FundusImage) -> RoiBox:
        ...


class BrightestRegionDetector:
    """
    Square box centred on the centroid of the brightest green-channel pixels.

    Args:
        percentile: green values at or above this percentile are "brightest"
        side_fraction: box side as a fraction of the shorter image side
    """

    def __init__(self, percentile: float = 98.0, side_fraction: float = 0.4):
        self.percentile = percentile
        self.side_fraction = side_fraction

    def detect(self, image: FundusImage) -> RoiBox:
        green = image.pixels[:, :, 1]
        w, h = image.width, image.height
        if green.min() == green.max():
            logger.debug("Uniform green channel, falling back to the centred ROI")
            return centered_box(w, h, self.side_fraction)
        threshold = np.percentile(green, self.percentile)
        ys, xs = np.nonzero(green >= threshold)
        cx, cy = xs.mean(), ys.mean()
        side = max(1, int(round(self.side_fraction * min(w, h))))
        x = int(np.clip(round(cx - side / 2.0), 0, w - side))
        y = int(np.clip(round(cy - side / 2.0), 0, h - side))
        return RoiBox(x, y, side, side)


def detect_roi(image: FundusImage, detector: Optional[RoiDetector] = None) -> RoiBox:
    box = (detector or BrightestRegionDetector()).detect(image)
    box.check_within(image.width, image.height)
    return box


# Augmentation


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    scale: bool = True
    illumination: bool = True
    scale_range: Tuple[float, float] = (0.9, 1.1)
    illumination_range: Tuple[float, float] = (0.8, 1.2)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=False, vflip=False, scale=False, illumination=False)

    @property
    def enabled(self) -> bool:
        return self.hflip or self.vflip or self.scale or self.illumination


def hflip(image: FundusImage, mask: SegmentationMask) -> Tuple[FundusImage, SegmentationMask]:
    return FundusImage(image.pixels[:, ::-1]), SegmentationMask(mask.labels[:, ::-1])


def vflip(image: FundusImage, mask: SegmentationMask) -> Tuple[FundusImage, SegmentationMask]:
    return FundusImage(image.pixels[::-1]), SegmentationMask(mask.labels[::-1])


def illuminate(image: FundusImage, gain: float) -> FundusImage:
    """Multiply every channel by ``gain``, round and clamp to [0, 255]"""
    scaled = np.rint(image.pixels.astype(np.float64) * gain)
    return FundusImage(np.clip(scaled, 0, 255).astype(np.uint8))


def _fit(array: np.ndarray, size: int, fill: Optional[int]) -> np.ndarray:
    """Centre-crop or pad the first two axes to ``size``; pads with edge values when ``fill`` is None"""
    n = array.shape[0]
    if n >= size:
        start = (n - size) // 2
        return array[start:start + size, start:start + size]
    before = (size - n) // 2
    after = size - n - before
    pad = [(before, after), (before, after)] + [(0, 0)] * (array.ndim - 2)
    if fill is None:
        return np.pad(array, pad, mode="edge")
    return np.pad(array, pad, mode="constant", constant_values=fill)


def rescale(image: FundusImage, mask: SegmentationMask,
            factor: float) -> Tuple[FundusImage, SegmentationMask]:
    """Zoom about the centre by ``factor`` keeping the original (square) size"""
    if image.width != image.height:
        raise ContractError(f"rescale expects a square ROI, got {image.width}x{image.height}")
    size = image.width
    scaled = max(1, int(round(size * factor)))
    if scaled == size:
        return image, mask
    pixels = cv2.resize(image.pixels, (scaled, scaled), interpolation=cv2.INTER_LINEAR)
    labels = cv2.resize(mask.labels, (scaled, scaled), interpolation=cv2.INTER_NEAREST)
    return (FundusImage(_fit(pixels, size, None)),
            SegmentationMask(_fit(labels, size, int(MaskClass.BACKGROUND))))


def augment(image: FundusImage, mask: SegmentationMask, config: AugmentConfig,
            seed: Any) -> Tuple[FundusImage, SegmentationMask]:
    """
    Random flips, then scaling, then illumination. The four random values are
    always drawn in that order, so disabling one op never shifts the others.
    """
    rng = np.random.default_rng(seed)
    u_h, u_v = rng.random(), rng.random()
    factor = rng.uniform(*config.scale_range)
    gain = rng.uniform(*config.illumination_range)

    if config.hflip and u_h < 0.5:
        image, mask = hflip(image, mask)
    if config.vflip and u_v < 0.5:
        image, mask = vflip(image, mask)
    if config.scale:
        image, mask = rescale(image, mask, factor)
    if config.illumination:
        image = illuminate(image, gain)
    return image, mask


# Synthetic fundus samples

BACKGROUND_RGB = (150.0, 60.0, 30.0)
DISC_RGB = (220.0, 140.0, 90.0)
CUP_RGB = (250.0, 220.0, 160.0)
MIN_SYNTH_SIZE = 32


@dataclass(frozen=True)
class SynthParams:
    """Ground truth recorded by :func:`synth_sample`; semi-axes in pixels"""

    center: Tuple[int, int]
    disc_radii: Tuple[float, float]
    cup_radii: Tuple[float, float]
    cup_ratio: float

    @property
    def expected_cdr(self) -> float:
        return self.cup_radii[0] / self.disc_radii[0]


@dataclass
class SyntheticSample:
    image: FundusImage
    mask: SegmentationMask
    roi: RoiBox
    params: SynthParams


def rasterize_ellipse(shape: Tuple[int, int], center: Tuple[float, float],
                      radii: Tuple[float, float]) -> np.ndarray:
    """Boolean (h, w) map of pixel centres inside the ellipse; ``center`` and ``radii`` are (row, col)"""
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    dy = (ys - center[0]) / radii[0]
    dx = (xs - center[1]) / radii[1]
    return dy * dy + dx * dx <= 1.0


def synth_sample(seed: Any, size: int) -> SyntheticSample:
    """
    Deterministic fundus-like sample: reddish textured background, a bright
    elliptical disc and a brighter concentric cup strictly inside it.
    """
    if size < MIN_SYNTH_SIZE:
        raise ContractError(f"synthetic samples need size >= {MIN_SYNTH_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    jitter = size // 10
    cy = int(size // 2 + rng.integers(-jitter, jitter + 1))
    cx = int(size // 2 + rng.integers(-jitter, jitter + 1))
    ry = float(rng.uniform(0.16, 0.22) * size)
    rx = float(ry * rng.uniform(0.85, 1.0))
    ratio = float(rng.uniform(0.35, 0.65))
    cup_radii = (ry * ratio, rx * ratio)

    disc = rasterize_ellipse((size, size), (cy, cx), (ry, rx))
    cup = rasterize_ellipse((size, size), (cy, cx), cup_radii)
    labels = np.full((size, size), MaskClass.BACKGROUND, dtype=np.uint8)
    labels[disc] = MaskClass.DISC
    labels[cup] = MaskClass.CUP

    texture = cv2.GaussianBlur(rng.normal(0.0, 1.0, (size, size, 3)).astype(np.float32), (0, 0), 3.0)
    canvas = np.empty((size, size, 3), dtype=np.float32)
    canvas[...] = BACKGROUND_RGB
    canvas += 80.0 * texture
    canvas[disc] = DISC_RGB
    canvas[cup] = CUP_RGB
    canvas = cv2.GaussianBlur(canvas, (0, 0), 1.0)
    canvas += rng.normal(0.0, 3.0, canvas.shape).astype(np.float32)
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)

    side = min(size, int(math.ceil(3.2 * max(ry, rx))))
    x = int(np.clip(cx - side // 2, 0, size - side))
    y = int(np.clip(cy - side // 2, 0, size - side))
    params = SynthParams(center=(cy, cx), disc_radii=(ry, rx), cup_radii=cup_radii, cup_ratio=ratio)
    return SyntheticSample(FundusImage(pixels), SegmentationMask(labels), RoiBox(x, y, side, side), params)


# Loading


class SampleCache:
    """Bounded in-memory cache of decoded, ROI-cropped samples (least recently used evicted first)"""

    def __init__(self, capacity: int = 256):
        self._cache: "OrderedDict[Any, Any]" = OrderedDict()
        self.capacity = capacity
        self._lock = threading.Lock()

    def get(self, key) -> Optional[Any]:
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        return None

    def set(self, key, value: Any):
        if self.capacity <= 0:
            return
        with self._lock:
            self._cache[key] = value
            self._cache.move_to_end(key)
            while len(self._cache) > self.capacity:
                self._cache.popitem(last=False)

    def clear(self):
        with self._lock:
            self._cache.clear()

    def __len__(self):
        return len(self._cache)


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {threads}")
    return threads


@dataclass
class Batch:
    indices: List[int]
    x: Tensor
    y: Tensor


class SegmentationDataset:
    """
    Deterministic batches of (image, target) tensors from a manifest.

    Sample order for epoch ``e`` is a permutation drawn from ``(seed, e)``;
    sample ``i`` is augmented with a generator seeded by ``(seed, e, i)``. Worker
    threads only change wall-clock time, never the delivered batches.
    """

    def __init__(self, manifest: DatasetManifest, input_size: int, batch_size: int,
                 seed: int = 0, augment_config: Optional[AugmentConfig] = None,
                 detector: Optional[RoiDetector] = None, threads: Optional[int] = None,
                 cache: Optional[SampleCache] = None):
        if len(manifest) == 0:
            raise ManifestError("manifest has no records")
        if batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {batch_size}")
        self.manifest = manifest
        self.input_size = input_size
        self.batch_size = batch_size
        self.seed = seed
        self.augment_config = augment_config or AugmentConfig.disabled()
        self.detector = detector
        self.threads = threads if threads is not None else threads_from_env()
        self.cache = cache if cache is not None else SampleCache()

    def __len__(self):
        return len(self.manifest)

    @property
    def effective_batch_size(self) -> int:
        return min(self.batch_size, len(self))

    def num_batches(self) -> int:
        """Full batches only; a dataset smaller than one batch forms a single batch"""
        return len(self) // self.effective_batch_size

    def load(self, index: int) -> Tuple[FundusImage, SegmentationMask]:
        """ROI-cropped, resampled sample ``index`` (cached)"""
        cached = self.cache.get(index)
        if cached is not None:
            return cached
        record = self.manifest[index]
        image = read_image(record.image)
        mask = read_mask(record.mask)
        if mask.shape != (image.height, image.width):
            raise ManifestError(
                f"{record.mask}: mask is {mask.width}x{mask.height}, image is {image.width}x{image.height}")
        if not mask.cup_enclosed():
            logger.warning("%s: cup region is not enclosed by the disc", record.mask)
        box = record.roi if record.roi is not None else detect_roi(image, self.detector)
        sample = crop_roi(image, mask, box, self.input_size)
        self.cache.set(index, sample)
        return sample  # type: ignore[return-value]

    def sample(self, index: int, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
        image, mask = self.load(index)
        if self.augment_config.enabled:
            image, mask = augment(image, mask, self.augment_config, [self.seed, epoch, index])
        return image_to_input(image), mask_to_target(mask).numpy()

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self))

    def batches(self, epoch: int, start: int = 0) -> Iterator[Batch]:
        """Batches of ``epoch`` starting at batch index ``start``"""
        order = self.order(epoch)
        size = self.effective_batch_size
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for b in range(start, self.num_batches()):
                indices = [int(i) for i in order[b * size:(b + 1) * size]]
                samples = list(pool.map(lambda i: self.sample(i, epoch), indices))
                x = np.stack([s[0] for s in samples])
                y = np.stack([s[1] for s in samples])
                yield Batch(indices, Tensor(x), Tensor(y))


def make_synthetic_dataset(out_dir: PathLike, count: int, size: int,
                           seed: int) -> Tuple[Path, List[SyntheticSample]]:
    """Write ``count`` samples plus ``manifest.txt`` into ``out_dir``"""
    if count < 1:
        raise ContractError(f"count must be positive, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples, records = [], []
    for i in range(count):
        sample = synth_sample([seed, i], size)
        image_path = out / f"sample_{i:04d}.ppm"
        mask_path = out / f"sample_{i:04d}_mask.pgm"
        write_raster(sample.image, image_path)
        write_raster(sample.mask, mask_path)
        samples.append(sample)
        records.append(ManifestRecord(image_path, mask_path, sample.roi))
    manifest_path = out / "manifest.txt"
    write_manifest(DatasetManifest(records), manifest_path)
    logger.info("Wrote %d synthetic %dx%d samples to %s", count, size, size, out)
    return manifest_path, samples

