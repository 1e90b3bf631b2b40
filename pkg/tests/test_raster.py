import logging

import numpy as np
import pytest

from odcs.errors import DimensionError, RasterParseError
from odcs.raster import (
    FundusImage,
    MaskClass,
    SegmentationMask,
    decode_mask,
    encode_mask,
    encode_pnm,
    image_to_input,
    mask_to_target,
    parse_pnm,
    read_image,
    read_mask,
    read_raster,
    target_to_mask,
    write_raster,
)
from odcs.tensor import Tensor

TWO_BY_TWO_P6 = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30])


class TestParsePnm:

    def test_decodes_two_by_two_colour(self):
        magic, pixels = parse_pnm(TWO_BY_TWO_P6)
        assert magic == "P6"
        assert pixels.shape == (2, 2, 3)
        assert pixels[0, 0].tolist() == [255, 0, 0]
        assert pixels[0, 1].tolist() == [0, 255, 0]
        assert pixels[1, 0].tolist() == [0, 0, 255]
        assert pixels[1, 1].tolist() == [10, 20, 30]

    def test_decodes_gray(self):
        magic, pixels = parse_pnm(b"P5 3 1 255\n" + bytes([0, 128, 255]))
        assert magic == "P5"
        assert pixels.tolist() == [[0, 128, 255]]

    def test_header_comments(self):
        data = b"P6\n# written by a scanner\n2 2\n# max\n255\n" + TWO_BY_TWO_P6[11:]
        _, pixels = parse_pnm(data)
        np.testing.assert_array_equal(pixels, parse_pnm(TWO_BY_TWO_P6)[1])

    def test_canonical_encoding_is_byte_exact(self):
        assert encode_pnm(parse_pnm(TWO_BY_TWO_P6)[1]) == TWO_BY_TWO_P6

    @pytest.mark.parametrize("header", [
        b"P6\n# written by a scanner\n2 2\n# max\n255\n",
        b"P6  2\t2\r\n\n  255 ",
        b"P6\n2\n2\n255\r",
        b"P6#c\n2 2 255\n",
    ])
    def test_non_canonical_header_re_encodes_canonically(self, header):
        payload = TWO_BY_TWO_P6[11:]
        magic, pixels = parse_pnm(header + payload)
        assert magic == "P6"
        encoded = encode_pnm(pixels)
        assert encoded == TWO_BY_TWO_P6
        assert encode_pnm(parse_pnm(encoded)[1]) == encoded

    def test_non_canonical_gray_file_rewritten_canonically(self, tmp_path):
        source = tmp_path / "mask_in.pgm"
        source.write_bytes(b"P5 # comment\n 3   1\n255\t" + bytes([0, 128, 255]))
        out = tmp_path / "mask_out.pgm"
        write_raster(read_mask(source), out)
        assert out.read_bytes() == b"P5\n3 1\n255\n" + bytes([0, 128, 255])

    def test_bad_magic(self):
        with pytest.raises(RasterParseError) as exc:
            parse_pnm(b"P3\n2 2\n255\n")
        assert exc.value.offset == 0

    def test_unsupported_maxval(self):
        with pytest.raises(RasterParseError, match="max value") as exc:
            parse_pnm(b"P5\n1 1\n65535\n\x00\x00")
        assert exc.value.offset == 7

    def test_truncated_payload(self):
        with pytest.raises(RasterParseError, match="truncated") as exc:
            parse_pnm(TWO_BY_TWO_P6[:-3])
        assert exc.value.offset == len(TWO_BY_TWO_P6) - 3

    def test_missing_dimension(self):
        with pytest.raises(RasterParseError, match="height"):
            parse_pnm(b"P5\n4 ")

    def test_zero_dimension(self):
        with pytest.raises(RasterParseError):
            parse_pnm(b"P5\n0 1\n255\n")

    def test_extra_trailing_bytes_ignored(self):
        _, pixels = parse_pnm(TWO_BY_TWO_P6 + b"\n")
        assert pixels.shape == (2, 2, 3)

    def test_encode_rejects_other_shapes(self):
        with pytest.raises(DimensionError):
            encode_pnm(np.zeros((2, 2, 4), dtype=np.uint8))


class TestFiles:

    def test_image_round_trip(self, tmp_path, rng):
        image = FundusImage(rng.integers(0, 256, size=(5, 7, 3)))
        path = tmp_path / "fundus.ppm"
        write_raster(image, path)
        assert read_image(path) == image
        assert path.read_bytes()[:11] == b"P6\n7 5\n255\n"

    def test_mask_round_trip(self, tmp_path, rng):
        mask = SegmentationMask(rng.integers(0, 3, size=(6, 4)))
        path = tmp_path / "mask.pgm"
        write_raster(mask, path)
        assert read_mask(path) == mask
        assert read_raster(path).snapped == 0

    def test_read_mask_rejects_colour(self, tmp_path):
        path = tmp_path / "colour.ppm"
        path.write_bytes(TWO_BY_TWO_P6)
        with pytest.raises(RasterParseError):
            read_mask(path)

    def test_read_image_rejects_gray(self, tmp_path):
        path = tmp_path / "gray.pgm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(RasterParseError):
            read_image(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            read_raster(tmp_path / "absent.ppm")


class TestMaskCodes:

    def test_canonical_codes(self):
        mask = decode_mask(np.array([[0, 128, 255]], dtype=np.uint8))
        assert mask.labels.tolist() == [[MaskClass.CUP, MaskClass.DISC, MaskClass.BACKGROUND]]
        assert mask.snapped == 0

    def test_encode_inverts_decode(self):
        gray = np.array([[0, 128], [255, 0]], dtype=np.uint8)
        np.testing.assert_array_equal(encode_mask(decode_mask(gray)), gray)

    def test_snapping_to_nearest_code(self, caplog):
        gray = np.array([[100, 200, 10, 64]], dtype=np.uint8)
        with caplog.at_level(logging.WARNING, logger="odcs.raster"):
            mask = decode_mask(gray, source="scan.pgm")
        assert mask.labels.tolist() == [[MaskClass.DISC, MaskClass.BACKGROUND, MaskClass.CUP, MaskClass.CUP]]
        assert mask.snapped == 4
        assert "scan.pgm" in caplog.text

    def test_rejects_bad_labels(self):
        with pytest.raises(DimensionError):
            SegmentationMask(np.array([[3]]))

    def test_cup_enclosed(self):
        labels = np.full((5, 5), MaskClass.BACKGROUND)
        labels[1:4, 1:4] = MaskClass.DISC
        labels[2, 2] = MaskClass.CUP
        assert SegmentationMask(labels).cup_enclosed()
        labels[2, 1] = MaskClass.CUP
        assert not SegmentationMask(labels).cup_enclosed()

    def test_disc_region_includes_cup(self):
        mask = SegmentationMask(np.array([[0, 1, 2]]))
        assert mask.disc_region().tolist() == [[True, True, False]]
        assert mask.cup().tolist() == [[True, False, False]]


class TestTargets:

    def test_mask_to_target_values(self):
        target = mask_to_target(SegmentationMask(np.array([[0, 1, 2]])))
        assert isinstance(target, Tensor)
        assert target.shape == (1, 1, 3)
        assert target.numpy().tolist() == [[[-1.0, 0.0, 1.0]]]

    def test_thresholds(self):
        values = np.array([[[-0.9, -0.5, -0.2, 0.0, 0.2, 0.5, 0.9]]])
        mask = target_to_mask(Tensor(values))
        cup, disc, bg = MaskClass.CUP, MaskClass.DISC, MaskClass.BACKGROUND
        assert mask.labels.tolist() == [[cup, cup, disc, disc, disc, bg, bg]]

    def test_target_round_trip(self, rng):
        mask = SegmentationMask(rng.integers(0, 3, size=(8, 8)))
        assert target_to_mask(mask_to_target(mask)) == mask

    def test_target_shape_check(self):
        with pytest.raises(DimensionError):
            target_to_mask(np.zeros((2, 4, 4)))

    def test_image_to_input_range(self):
        image = FundusImage(np.array([[[0, 255, 128]]]))
        x = image_to_input(image)
        assert x.shape == (3, 1, 1)
        assert x.dtype == np.float32
        np.testing.assert_allclose(x[:, 0, 0], [-1.0, 1.0, 128 / 127.5 - 1.0], atol=1e-6)
