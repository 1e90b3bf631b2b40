import struct
from collections import OrderedDict

import numpy as np
import pytest

from odcs.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from odcs.errors import CheckpointError


@pytest.fixture
def checkpoint(rng):
    tensors = OrderedDict([
        ("generator.encoder.0.weight", rng.normal(size=(4, 3, 4, 4)).astype(np.float32)),
        ("generator.encoder.1.running_var", np.ones(8, dtype=np.float32)),
        ("extractor.layer.0.bias", np.zeros(4, dtype=np.float32)),
    ])
    optimizer = {
        "t": 12, "lr": 0.0002, "beta1": 0.5, "beta2": 0.999, "eps": 1e-8,
        "m": OrderedDict([("generator.encoder.0.weight", rng.normal(size=(4, 3, 4, 4)).astype(np.float32))]),
        "v": OrderedDict([("generator.encoder.0.weight", rng.random((4, 3, 4, 4)).astype(np.float32))]),
    }
    return Checkpoint(config_text="seed = 3\nlambda = 150.0\n", step=12, next_epoch=3, next_batch=1,
                      seed=3, tensors=tensors, optimizer=optimizer)


class TestEncoding:

    def test_header(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        assert data[:4] == MAGIC
        assert struct.unpack("<H", data[4:6]) == (FORMAT_VERSION,)

    def test_decode_restores_everything(self, checkpoint):
        decoded = decode_checkpoint(encode_checkpoint(checkpoint))
        assert decoded.config_text == checkpoint.config_text
        assert (decoded.step, decoded.next_epoch, decoded.next_batch, decoded.seed) == (12, 3, 1, 3)
        assert list(decoded.tensors) == list(checkpoint.tensors)
        for name, value in checkpoint.tensors.items():
            np.testing.assert_array_equal(decoded.tensors[name], value)
        assert decoded.optimizer["t"] == 12
        assert decoded.optimizer["eps"] == 1e-8
        np.testing.assert_array_equal(decoded.optimizer["v"]["generator.encoder.0.weight"],
                                      checkpoint.optimizer["v"]["generator.encoder.0.weight"])

    def test_save_load_save_is_byte_identical(self, checkpoint, tmp_path):
        first, second = tmp_path / "a.odcs", tmp_path / "b.odcs"
        save_checkpoint(checkpoint, first)
        save_checkpoint(load_checkpoint(first), second)
        assert first.read_bytes() == second.read_bytes()
        assert not (tmp_path / "a.odcs.tmp").exists()

    def test_section(self, checkpoint):
        section = checkpoint.section("generator")
        assert list(section) == ["encoder.0.weight", "encoder.1.running_var"]

    def test_empty_tables(self):
        data = encode_checkpoint(Checkpoint(config_text=""))
        decoded = decode_checkpoint(data)
        assert decoded.tensors == {}
        assert decoded.optimizer["m"] == {}


class TestDecodeErrors:

    def test_bad_magic(self, checkpoint):
        data = b"NOPE" + encode_checkpoint(checkpoint)[4:]
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(data)

    def test_unsupported_version(self, checkpoint):
        data = bytearray(encode_checkpoint(checkpoint))
        data[4:6] = struct.pack("<H", FORMAT_VERSION + 1)
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(data))

    @pytest.mark.parametrize("keep", [0, 3, 5, 10, 40, 200, -1])
    def test_truncated(self, checkpoint, keep):
        data = encode_checkpoint(checkpoint)
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:keep])

    def test_trailing_bytes(self, checkpoint):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(encode_checkpoint(checkpoint) + b"\x00")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.odcs")
