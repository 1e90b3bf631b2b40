"""
Evaluation metrics: hard dice per class and vertical cup-to-disc ratio.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .errors import DimensionError, ManifestError, UndefinedCDRError
from .raster import MaskClass, SegmentationMask

logger = logging.getLogger(__name__)

# Published full-scale results, shown for context only
REFERENCE_RESULTS = {"dice_cup": 0.8341, "dice_disc": 0.9340, "cdr_mae": 0.0605}

CSV_COLUMNS = ("id", "dice_cup", "dice_disc", "cdr_pred", "cdr_true")


def class_indicator(mask: SegmentationMask, cls: MaskClass) -> np.ndarray:
    """Binary map of ``cls``; the disc indicator includes cup pixels"""
    cls = MaskClass(cls)
    if cls == MaskClass.DISC:
        return mask.disc_region()
    return mask.labels == cls


def hard_dice(pred: SegmentationMask, truth: SegmentationMask, cls: MaskClass) -> float:
    if pred.shape != truth.shape:
        raise DimensionError(f"hard_dice: mask shapes {pred.shape} and {truth.shape} differ")
    p = class_indicator(pred, cls)
    t = class_indicator(truth, cls)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def vertical_cdr(mask: SegmentationMask) -> float:
    """Rows containing cup over rows containing disc-or-cup"""
    disc_rows = int(mask.disc_region().any(axis=1).sum())
    if disc_rows == 0:
        raise UndefinedCDRError("vertical CDR is undefined for a mask without a disc region")
    cup_rows = int(mask.cup().any(axis=1).sum())
    return cup_rows / disc_rows


@dataclass
class EvalRow:
    id: str
    dice_cup: float
    dice_disc: float
    cdr_pred: Optional[float]
    cdr_true: Optional[float]

    @property
    def cdr_error(self) -> Optional[float]:
        if self.cdr_pred is None or self.cdr_true is None:
            return None
        return abs(self.cdr_pred - self.cdr_true)


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)

    @property
    def dice_cup(self) -> float:
        return float(np.mean([r.dice_cup for r in self.rows]))

    @property
    def dice_disc(self) -> float:
        return float(np.mean([r.dice_disc for r in self.rows]))

    @property
    def cdr_mae(self) -> float:
        """Mean absolute CDR error over images where both ratios are defined (NaN if none)"""
        errors = [r.cdr_error for r in self.rows if r.cdr_error is not None]
        return float(np.mean(errors)) if errors else math.nan

    @property
    def cdr_undefined(self) -> int:
        return sum(1 for r in self.rows if r.cdr_error is None)

    def to_dict(self) -> dict:
        mae = self.cdr_mae
        return {
            "images": len(self.rows),
            "dice_cup": self.dice_cup,
            "dice_disc": self.dice_disc,
            "cdr_mae": None if math.isnan(mae) else mae,
            "cdr_undefined": self.cdr_undefined,
            "rows": [
                {"id": r.id, "dice_cup": r.dice_cup, "dice_disc": r.dice_disc,
                 "cdr_pred": r.cdr_pred, "cdr_true": r.cdr_true}
                for r in self.rows
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.id, repr(r.dice_cup), repr(r.dice_disc),
                             "" if r.cdr_pred is None else repr(r.cdr_pred),
                             "" if r.cdr_true is None else repr(r.cdr_true)])
        return buf.getvalue()


def _cdr_or_none(mask: SegmentationMask, image_id: str, which: str) -> Optional[float]:
    try:
        return vertical_cdr(mask)
    except UndefinedCDRError:
        logger.warning("%s: %s mask has no disc region, excluded from CDR MAE", image_id, which)
        return None


def evaluate(pred_masks: Mapping[str, SegmentationMask],
             truth_masks: Mapping[str, SegmentationMask]) -> EvalReport:
    """Per-image dice and CDR for aligned id sets, in ``truth_masks`` order"""
    if not truth_masks:
        raise ManifestError("nothing to evaluate: no ground-truth masks")
    missing = set(truth_masks) - set(pred_masks)
    extra = set(pred_masks) - set(truth_masks)
    if missing or extra:
        raise ManifestError(
            f"prediction and ground-truth ids differ: missing {sorted(missing)}, unexpected {sorted(extra)}")

    report = EvalReport()
    for image_id, truth in truth_masks.items():
        pred = pred_masks[image_id]
        report.rows.append(EvalRow(
            id=image_id,
            dice_cup=hard_dice(pred, truth, MaskClass.CUP),
            dice_disc=hard_dice(pred, truth, MaskClass.DISC),
            cdr_pred=_cdr_or_none(pred, image_id, "predicted"),
            cdr_true=_cdr_or_none(truth, image_id, "ground-truth"),
        ))
    return report


def summary_lines(report: EvalReport) -> Dict[str, str]:
    mae = report.cdr_mae
    return {
        "Images": str(len(report.rows)),
        "Dice (cup)": f"{report.dice_cup:.4f}",
        "Dice (disc)": f"{report.dice_disc:.4f}",
        "CDR MAE": "n/a" if math.isnan(mae) else f"{mae:.4f}",
        "CDR undefined": str(report.cdr_undefined),
    }
