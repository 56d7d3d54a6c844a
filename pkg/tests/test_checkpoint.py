import struct

import numpy as np
import pytest

from dnet.checkpoint import MAGIC, VERSION, config_diff, load_checkpoint, save_checkpoint
from dnet.errors import (CheckpointError, CheckpointFormatError, CheckpointMismatchError, CheckpointTruncatedError,
                         CheckpointVersionError)
from dnet.model import DNet, train_step
from dnet.optim import AdamState

from conftest import tiny_config


@pytest.fixture
def trained(tmp_path):
    m = DNet(tiny_config(0))
    state = AdamState.for_params(m.parameters())
    x = np.random.default_rng(0).normal(size=(2, 16, 3))
    train_step(m, x, [0, 1], state, 1e-3, np.random.default_rng(0))
    path = tmp_path / "m.dnet"
    save_checkpoint(path, m, state, {"epoch": 3, "seed": 0})
    return m, state, path


class TestRoundTrip:
    def test_bit_identical(self, trained):
        m, state, path = trained
        ck = load_checkpoint(path)
        for (name, p), (name2, arr) in zip(m.named_parameters(), ck.tensors.items()):
            assert name == name2
            assert arr.tobytes() == p.data.astype("<f4").tobytes()
        back = ck.build_model()
        for (_, a), (_, b) in zip(m.named_parameters(), back.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        assert ck.config == m.config
        assert ck.metadata == {"epoch": 3, "seed": 0}
        assert ck.optimizer.step == 1
        for a, b in zip(state.m + state.v, ck.optimizer.m + ck.optimizer.v):
            np.testing.assert_array_equal(a, b)

    def test_resave_is_byte_identical(self, trained, tmp_path):
        _, _, path = trained
        ck = load_checkpoint(path)
        save_checkpoint(tmp_path / "again.dnet", ck.build_model(), ck.optimizer, ck.metadata)
        assert (tmp_path / "again.dnet").read_bytes() == path.read_bytes()

    def test_without_optimizer(self, tmp_path):
        m = DNet(tiny_config(1))
        save_checkpoint(tmp_path / "p.dnet", m)
        ck = load_checkpoint(tmp_path / "p.dnet")
        assert ck.optimizer is None and ck.metadata == {}

    def test_layout(self, trained):
        _, _, path = trained
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<I", raw[4:8])[0] == VERSION
        n = struct.unpack("<I", raw[8:12])[0]
        assert raw[12:12 + n].startswith(b"{")


class TestErrors:
    def test_bad_magic(self, trained):
        _, _, path = trained
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XNET"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version(self, trained):
        _, _, path = trained
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [3, 10, 200, -1])
    def test_truncated(self, trained, keep):
        _, _, path = trained
        raw = path.read_bytes()
        path.write_bytes(raw[:keep] if keep > 0 else raw[:-1])
        with pytest.raises((CheckpointTruncatedError, CheckpointFormatError)) as e:
            load_checkpoint(path)
        if keep != 3:
            assert e.type is CheckpointTruncatedError

    def test_trailing_bytes(self, trained):
        _, _, path = trained
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_n1_mismatch(self, tmp_path):
        m = DNet(tiny_config(0, n1=320))
        save_checkpoint(tmp_path / "a.dnet", m)
        with pytest.raises(CheckpointMismatchError) as e:
            load_checkpoint(tmp_path / "a.dnet", expected=tiny_config(0, n1=160))
        assert "n1=320 (requested 160)" in str(e.value)

    def test_errors_are_distinct(self):
        kinds = {CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError, CheckpointMismatchError}
        assert len(kinds) == 4
        assert all(issubclass(k, CheckpointError) for k in kinds)

    def test_name_mismatch_on_build(self, trained):
        _, _, path = trained
        ck = load_checkpoint(path)
        ck.tensors.pop(next(iter(ck.tensors)))
        with pytest.raises(CheckpointMismatchError):
            ck.build_model()

    def test_shape_mismatch_on_build(self, trained):
        _, _, path = trained
        ck = load_checkpoint(path)
        name = next(iter(ck.tensors))
        ck.tensors[name] = np.zeros((1, 1), np.float32)
        with pytest.raises(CheckpointMismatchError):
            ck.build_model()


class TestConfigDiff:
    def test_seed_ignored(self):
        assert config_diff(tiny_config(0), tiny_config(5)) == []

    def test_nested_keys(self):
        diff = config_diff(tiny_config(0), tiny_config(0, sgc=dict(k=5)))
        assert diff == [("sgc.k", 3, 5)]
