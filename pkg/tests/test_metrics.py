import csv
import io
import math

import numpy as np
import pytest

from odcs.errors import DimensionError, ManifestError, UndefinedCDRError
from odcs.metrics import (
    CSV_COLUMNS,
    EvalReport,
    EvalRow,
    class_indicator,
    evaluate,
    hard_dice,
    summary_lines,
    vertical_cdr,
)
from odcs.raster import MaskClass, SegmentationMask

CUP, DISC, BG = MaskClass.CUP, MaskClass.DISC, MaskClass.BACKGROUND


def stacked_mask(disc_rows, cup_rows, height=64, width=16):
    """Disc across ``disc_rows`` rows, cup across the first ``cup_rows`` of them"""
    labels = np.full((height, width), BG, dtype=np.uint8)
    labels[5:5 + disc_rows, 4:12] = DISC
    labels[5:5 + cup_rows, 6:10] = CUP
    return SegmentationMask(labels)


class TestHardDice:

    def test_partial_overlap(self):
        truth = np.full((1, 10), DISC, dtype=np.uint8)
        pred = truth.copy()
        truth[0, 0:6] = CUP
        pred[0, 3:7] = CUP
        assert hard_dice(SegmentationMask(pred), SegmentationMask(truth), CUP) == pytest.approx(0.6)

    def test_disc_includes_cup(self):
        truth = SegmentationMask(np.array([[CUP, DISC, BG, BG]]))
        pred = SegmentationMask(np.array([[DISC, CUP, BG, BG]]))
        assert hard_dice(pred, truth, DISC) == 1.0
        assert hard_dice(pred, truth, CUP) == 0.0

    def test_empty_on_both_sides(self):
        mask = SegmentationMask(np.full((3, 3), BG))
        assert hard_dice(mask, mask, CUP) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            hard_dice(SegmentationMask(np.zeros((2, 2))), SegmentationMask(np.zeros((3, 3))), CUP)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_masks(self, seed):
        rng = np.random.default_rng(seed)
        a = SegmentationMask(rng.integers(0, 3, size=(12, 12)))
        b = SegmentationMask(rng.integers(0, 3, size=(12, 12)))
        for cls in (CUP, DISC):
            value = hard_dice(a, b, cls)
            p, t = class_indicator(a, cls), class_indicator(b, cls)
            assert value == pytest.approx(2 * (p & t).sum() / (p.sum() + t.sum()))
            assert 0.0 <= value <= 1.0
            assert value == hard_dice(b, a, cls)
            assert hard_dice(a, a, cls) == 1.0


class TestVerticalCdr:

    def test_row_ratio(self):
        assert vertical_cdr(stacked_mask(51, 21)) == pytest.approx(21 / 51)

    def test_no_cup(self):
        assert vertical_cdr(stacked_mask(10, 0)) == 0.0

    def test_width_does_not_matter(self):
        labels = stacked_mask(20, 10).labels
        labels[5:15, 2:14] = CUP
        assert vertical_cdr(SegmentationMask(labels)) == pytest.approx(0.5)

    def test_undefined_without_disc(self):
        with pytest.raises(UndefinedCDRError):
            vertical_cdr(SegmentationMask(np.full((4, 4), BG)))


class TestEvaluate:

    def test_perfect_predictions(self):
        truth = {"a": stacked_mask(20, 10), "b": stacked_mask(30, 12)}
        report = evaluate(dict(truth), truth)
        assert report.dice_cup == 1.0
        assert report.dice_disc == 1.0
        assert report.cdr_mae == 0.0
        assert [r.id for r in report.rows] == ["a", "b"]

    def test_means_over_images(self):
        truth = {"a": stacked_mask(20, 10), "b": stacked_mask(20, 10)}
        pred = {"a": stacked_mask(20, 10), "b": stacked_mask(20, 5)}
        report = evaluate(pred, truth)
        assert report.rows[1].dice_cup == pytest.approx(2 * 20 / (20 + 40))
        assert report.dice_cup == pytest.approx((1.0 + 2 / 3) / 2)
        assert report.cdr_mae == pytest.approx(0.25 / 2)

    def test_undefined_cdr_excluded(self, caplog):
        truth = {"a": stacked_mask(20, 10), "b": stacked_mask(20, 10)}
        pred = {"a": stacked_mask(20, 10), "b": SegmentationMask(np.full((64, 16), BG))}
        report = evaluate(pred, truth)
        assert report.cdr_undefined == 1
        assert report.cdr_mae == 0.0
        assert report.rows[1].cdr_pred is None
        assert "b: predicted" in caplog.text

    def test_all_undefined_is_nan(self):
        empty = SegmentationMask(np.full((4, 4), BG))
        report = evaluate({"a": empty}, {"a": empty})
        assert math.isnan(report.cdr_mae)
        assert report.to_dict()["cdr_mae"] is None
        assert summary_lines(report)["CDR MAE"] == "n/a"

    def test_mismatched_ids(self):
        with pytest.raises(ManifestError, match="missing"):
            evaluate({"a": stacked_mask(4, 2)}, {"b": stacked_mask(4, 2)})

    def test_empty(self):
        with pytest.raises(ManifestError):
            evaluate({}, {})


class TestReport:

    def report(self):
        return EvalReport([EvalRow("a", 0.5, 0.75, 0.4, 0.5), EvalRow("b", 1.0, 1.0, None, 0.3)])

    def test_to_dict(self):
        data = self.report().to_dict()
        assert data["images"] == 2
        assert data["dice_cup"] == 0.75
        assert data["cdr_mae"] == pytest.approx(0.1)
        assert data["rows"][1]["cdr_pred"] is None

    def test_to_csv(self):
        rows = list(csv.reader(io.StringIO(self.report().to_csv())))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert rows[1] == ["a", "0.5", "0.75", "0.4", "0.5"]
        assert rows[2] == ["b", "1.0", "1.0", "", "0.3"]

    def test_summary_lines(self):
        lines = summary_lines(self.report())
        assert lines["Images"] == "2"
        assert lines["Dice (disc)"] == "0.8750"
        assert lines["CDR undefined"] == "1"
