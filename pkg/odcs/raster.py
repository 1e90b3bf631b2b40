"""
Fundus images, segmentation masks and their on-disk formats
===========================================================

Colour images are binary PPM (``P6``), masks binary PGM (``P5``), both with
max value 255. Mask gray codes: cup 0, disc 128, background 255.

The network sees images as 3×H×W arrays in [-1, 1] and masks as a
single-channel target: cup -1, disc 0, background +1.
"""

import logging
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import DimensionError, RasterParseError
from .tensor import Tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

MAXVAL = 255
CUP_THRESHOLD = -1.0 / 3.0
BACKGROUND_THRESHOLD = 1.0 / 3.0


class MaskClass(IntEnum):
    CUP = 0
    DISC = 1
    BACKGROUND = 2


# Indexed by MaskClass
GRAY_CODES = np.array([0, 128, 255], dtype=np.uint8)
TARGET_VALUES = np.array([-1.0, 0.0, 1.0], dtype=np.float32)


@dataclass(eq=False)
class FundusImage:
    """8-bit RGB image, ``pixels`` of shape (height, width, 3)"""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or min(self.pixels.shape[:2]) <= 0:
            raise DimensionError(f"FundusImage expects (height, width, 3) pixels, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, FundusImage) and np.array_equal(self.pixels, other.pixels)


@dataclass(eq=False)
class SegmentationMask:
    """
    Per-pixel :class:`MaskClass` labels, shape (height, width).

    ``snapped`` counts source pixels that were not one of the three gray codes
    when the mask was decoded.
    """

    labels: np.ndarray
    snapped: int = field(default=0, compare=False)

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or min(self.labels.shape) <= 0:
            raise DimensionError(f"SegmentationMask expects (height, width) labels, got {self.labels.shape}")
        if self.labels.max() > MaskClass.BACKGROUND:
            raise DimensionError(f"mask labels must be 0, 1 or 2, found {int(self.labels.max())}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def cup(self) -> np.ndarray:
        return self.labels == MaskClass.CUP

    def disc_region(self) -> np.ndarray:
        """Disc indicator including the cup"""
        return self.labels != MaskClass.BACKGROUND

    def cup_enclosed(self) -> bool:
        """True when no cup pixel touches background (4-neighbourhood) or the image border"""
        cup = self.cup()
        if not cup.any():
            return True
        if cup[0].any() or cup[-1].any() or cup[:, 0].any() or cup[:, -1].any():
            return False
        bg = self.labels == MaskClass.BACKGROUND
        touching = (
            (cup[1:] & bg[:-1]).any() or (cup[:-1] & bg[1:]).any()
            or (cup[:, 1:] & bg[:, :-1]).any() or (cup[:, :-1] & bg[:, 1:]).any()
        )
        return not touching

    def __eq__(self, other):
        return isinstance(other, SegmentationMask) and np.array_equal(self.labels, other.labels)


# PPM / PGM


class _HeaderReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_space(self):
        data = self.data
        while self.pos < len(data):
            c = data[self.pos:self.pos + 1]
            if c == b"#":
                end = data.find(b"\n", self.pos)
                self.pos = len(data) if end < 0 else end + 1
            elif c.isspace():
                self.pos += 1
            else:
                break

    def integer(self, what: str) -> int:
        self.skip_space()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if start == self.pos:
            raise RasterParseError(f"expected {what}", start)
        return int(self.data[start:self.pos])


def parse_pnm(data: bytes) -> Tuple[str, np.ndarray]:
    """
    Decode a binary PPM/PGM buffer.

    Returns the magic (``"P6"`` or ``"P5"``) and the pixels, (h, w, 3) or (h, w) uint8.
    """
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise RasterParseError(f"unsupported magic {magic!r}, expected P6 or P5", 0)
    reader = _HeaderReader(data)
    reader.pos = 2
    if reader.pos < len(data) and not data[2:3].isspace() and data[2:3] != b"#":
        raise RasterParseError("expected whitespace after magic", 2)
    width = reader.integer("width")
    height = reader.integer("height")
    reader.skip_space()
    maxval_at = reader.pos
    maxval = reader.integer("max value")
    if width <= 0 or height <= 0:
        raise RasterParseError(f"image dimensions must be positive, got {width}x{height}", maxval_at)
    if maxval != MAXVAL:
        raise RasterParseError(f"unsupported max value {maxval}, only 255 is accepted", maxval_at)
    if reader.pos >= len(data) or not data[reader.pos:reader.pos + 1].isspace():
        raise RasterParseError("expected a single whitespace byte before the payload", reader.pos)
    offset = reader.pos + 1

    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise RasterParseError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}", offset + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return magic.decode("ascii"), pixels.reshape(shape).copy()


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Canonical binary PPM (h, w, 3) or PGM (h, w) encoding"""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = "P6"
    elif pixels.ndim == 2:
        magic = "P5"
    else:
        raise DimensionError(f"cannot encode pixels of shape {pixels.shape} as PPM/PGM")
    height, width = pixels.shape[:2]
    return f"{magic}\n{width} {height}\n{MAXVAL}\n".encode("ascii") + pixels.tobytes()


def read_raster(path: PathLike) -> Union[FundusImage, SegmentationMask]:
    """Read a P6 file as a :class:`FundusImage` or a P5 file as a :class:`SegmentationMask`"""
    data = Path(path).read_bytes()
    magic, pixels = parse_pnm(data)
    if magic == "P6":
        return FundusImage(pixels)
    return decode_mask(pixels, source=str(path))


def read_image(path: PathLike) -> FundusImage:
    value = read_raster(path)
    if not isinstance(value, FundusImage):
        raise RasterParseError(f"{path}: expected a colour P6 image, found a P5 mask", 0)
    return value


def read_mask(path: PathLike) -> SegmentationMask:
    value = read_raster(path)
    if not isinstance(value, SegmentationMask):
        raise RasterParseError(f"{path}: expected a P5 mask, found a colour P6 image", 0)
    return value


def write_raster(value: Union[FundusImage, SegmentationMask], path: PathLike):
    if isinstance(value, FundusImage):
        data = encode_pnm(value.pixels)
    elif isinstance(value, SegmentationMask):
        data = encode_pnm(encode_mask(value))
    else:
        raise TypeError(f"cannot write {type(value).__name__} as a raster")
    Path(path).write_bytes(data)


# Mask codes and targets


def decode_mask(gray: np.ndarray, source: str = "<array>") -> SegmentationMask:
    """
    Map gray codes to classes: 0 cup, 128 disc, 255 background.

    Other values snap to the nearest code (ties go to the darker code); the
    number of snapped pixels is logged and kept on the mask.
    """
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise DimensionError(f"decode_mask expects a (height, width) gray image, got {gray.shape}")
    distance = np.abs(gray.astype(np.int16)[..., None] - GRAY_CODES.astype(np.int16))
    labels = distance.argmin(axis=-1).astype(np.uint8)
    snapped = int(np.count_nonzero(distance.min(axis=-1)))
    if snapped:
        logger.warning("%s: %d mask pixels were not 0/128/255 and snapped to the nearest code",
                       source, snapped)
    return SegmentationMask(labels, snapped=snapped)


def encode_mask(mask: SegmentationMask) -> np.ndarray:
    return GRAY_CODES[mask.labels]


def mask_to_target(mask: SegmentationMask) -> Tensor:
    """1×H×W target tensor: cup -1, disc 0, background +1"""
    return Tensor(TARGET_VALUES[mask.labels][None])


def target_to_mask(t: Union[Tensor, np.ndarray]) -> SegmentationMask:
    """Threshold a 1×H×W (or H×W) map at -1/3 and +1/3"""
    values = t.numpy() if isinstance(t, Tensor) else np.asarray(t)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 2:
        raise DimensionError(f"target_to_mask expects a 1×H×W map, got shape {values.shape}")
    labels = np.full(values.shape, MaskClass.DISC, dtype=np.uint8)
    labels[values < CUP_THRESHOLD] = MaskClass.CUP
    labels[values > BACKGROUND_THRESHOLD] = MaskClass.BACKGROUND
    return SegmentationMask(labels)


def image_to_input(image: FundusImage) -> np.ndarray:
    """3×H×W float32 array scaled to [-1, 1]"""
    return (image.pixels.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1).copy()
