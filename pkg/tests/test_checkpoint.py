"""Checkpoint binary format: bitwise round trips, CRC integrity, and
model state restoration."""

import struct

import numpy as np
import pytest

from psnet.checkpoint import (
    CrcMismatchError,
    FormatError,
    ShapeMismatchError,
    load_checkpoint,
    load_into_model,
    save_checkpoint,
)
from psnet.models import BackboneConfig, build_model, forward_logits
from psnet.psn import PsnMode
from psnet.tensor import Tensor

MLP = BackboneConfig(kind="mlp", input_shape=(5,), hidden=(7,), embedding_dim=4)


def _sample_state(seed=0):
    rng = np.random.default_rng(seed)
    return [
        ("a.w", rng.normal(size=(3, 4))),
        ("b.scalar", rng.normal(size=(1,))),
        ("c.kernel", rng.normal(size=(2, 1, 3, 3))),
        ("d.unicode.名前", rng.normal(size=(6,))),
    ]


class TestRoundTrip:
    def test_bitwise(self, tmp_path):
        state = _sample_state()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, state)
        loaded = load_checkpoint(path)
        assert [n for n, _ in loaded] == [n for n, _ in state]
        for (_, a), (_, b) in zip(state, loaded):
            assert a.shape == b.shape
            assert a.tobytes() == b.tobytes()

    def test_save_load_save_identical(self, tmp_path):
        p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
        save_checkpoint(p1, _sample_state())
        save_checkpoint(p2, load_checkpoint(p1))
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_negative_zero_and_denormals_survive(self, tmp_path):
        state = [("x", np.array([-0.0, 5e-324, np.nextafter(1.0, 0.0)]))]
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, state)
        (_, arr), = load_checkpoint(path)
        assert arr.tobytes() == state[0][1].tobytes()


class TestIntegrity:
    def test_single_byte_flips_detected(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, _sample_state())
        blob = bytearray(open(path, "rb").read())
        rng = np.random.default_rng(1)
        positions = list(rng.integers(0, len(blob), size=25)) + [0, len(blob) - 1]
        for pos in positions:
            corrupted = bytearray(blob)
            corrupted[pos] ^= 0x40
            bad = str(tmp_path / "bad.ckpt")
            open(bad, "wb").write(bytes(corrupted))
            with pytest.raises((CrcMismatchError, FormatError)):
                load_checkpoint(bad)

    def test_truncated(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, _sample_state())
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:10])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        import zlib

        body = b"PSNT" + struct.pack("<II", 99, 0)
        blob = body + struct.pack("<I", zlib.crc32(body))
        path = str(tmp_path / "m.ckpt")
        open(path, "wb").write(blob)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)


class TestModelState:
    def test_restores_exactly(self, tmp_path):
        model = build_model(MLP, PsnMode.TRAIN_BETA_GAMMA, 3, seed=1)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.named_state())

        fresh = build_model(MLP, PsnMode.TRAIN_BETA_GAMMA, 3, seed=99)
        load_into_model(fresh, path)
        for (_, a), (_, b) in zip(model.named_state(), fresh.named_state()):
            assert a.tobytes() == b.tobytes()
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5)))
        model.set_training(False)
        fresh.set_training(False)
        assert (forward_logits(model, x).data == forward_logits(fresh, x).data).all()

    def test_includes_frozen_psn_and_bn_buffers(self, tmp_path):
        cfg = BackboneConfig(kind="tiny_resnet", input_shape=(1, 6, 6), blocks=(1, 1, 1), channels=(2, 2, 4), embedding_dim=4)
        model = build_model(cfg, PsnMode.TRAIN_BETA, 3, seed=0)
        names = [n for n, _ in model.named_state()]
        assert "psn.beta" in names  # trainable
        assert "psn.alpha" in names and "psn.gamma" in names  # frozen
        assert any(n.endswith("running_mean") for n in names)

    def test_shape_mismatch(self, tmp_path):
        model = build_model(MLP, PsnMode.FIXED, 3, seed=1)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.named_state())
        other = build_model(
            BackboneConfig(kind="mlp", input_shape=(5,), hidden=(7,), embedding_dim=8),
            PsnMode.FIXED,
            3,
            seed=1,
        )
        with pytest.raises(ShapeMismatchError):
            load_into_model(other, path)

    def test_name_mismatch(self, tmp_path):
        model = build_model(MLP, PsnMode.FIXED, 3, seed=1)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.named_state())
        other = build_model(MLP, PsnMode.DISABLED, 3, seed=1)
        with pytest.raises(ShapeMismatchError):
            load_into_model(other, path)
