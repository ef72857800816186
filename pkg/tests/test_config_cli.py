"""Config grammar, CLI commands, exit codes, and output schemas."""

import hashlib
import os

import numpy as np
import pytest

import psnet.cli as cli
from psnet.config import ConfigError, parse_config
from psnet.losses import AngularSoftmax, ArcFace, CrossEntropy
from psnet.psn import PsnMode

SMALL_RUN = """
model.kind = mlp
model.input_shape = 16
model.hidden = 24
model.embedding_dim = 8
psn.mode = train_beta_gamma
train.epochs = 2
train.drop_epochs = 2
train.batch_size = 32
data.classes = 4
data.per_class = 25
"""


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestConfigGrammar:
    def test_defaults(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "# nothing overridden\n"))
        assert cfg["train.batch_size"] == 64
        assert cfg["train.epochs"] == 20
        assert cfg["train.lr0"] == 0.01
        assert cfg["train.drop_epochs"] == (8, 12, 16)
        assert cfg["psn.mode"] == "fixed"

    def test_unknown_key_names_line(self, tmp_path):
        path = _write(tmp_path, "train.epochs = 5\npns.mode = fixed\n")
        with pytest.raises(ConfigError, match=r":2: unknown key 'pns.mode'"):
            parse_config(path)

    def test_duplicate_key(self, tmp_path):
        path = _write(tmp_path, "train.epochs = 5\ntrain.epochs = 6\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(path)

    def test_bad_value_names_key(self, tmp_path):
        path = _write(tmp_path, "train.epochs = soon\n")
        with pytest.raises(ConfigError, match="train.epochs"):
            parse_config(path)

    def test_missing_equals(self, tmp_path):
        path = _write(tmp_path, "train.epochs 5\n")
        with pytest.raises(ConfigError, match=":1:"):
            parse_config(path)

    def test_loss_assembly(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "loss.kind = arcface\nloss.arcface.m = 0.3\n"))
        kind = cfg.loss_kind()
        assert isinstance(kind, ArcFace) and kind.m == 0.3
        cfg = parse_config(_write(tmp_path, "loss.kind = angular_softmax\n", "b.cfg"))
        assert isinstance(cfg.loss_kind(), AngularSoftmax)
        cfg = parse_config(_write(tmp_path, "", "c.cfg"))
        assert isinstance(cfg.loss_kind(), CrossEntropy)

    def test_train_config_assembly(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "train.momentum = 0.5\ntrain.seed = 3\n"))
        tc = cfg.train_config()
        assert tc.momentum == 0.5 and tc.seed == 3 and tc.psn_mode is PsnMode.FIXED

    def test_invalid_combination_is_config_error(self, tmp_path):
        path = _write(tmp_path, "train.drop_epochs = 30\n")  # beyond epochs=20
        with pytest.raises(ConfigError):
            parse_config(path).train_config()

    def test_required_key(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "data.source = idx\n"))
        with pytest.raises(ConfigError, match="data.images"):
            cfg.require("data.images")


class TestCommands:
    def _run_cfg(self, tmp_path, extra=""):
        return _write(tmp_path, SMALL_RUN + f"out.dir = {tmp_path}/out\n" + extra)

    def test_train_writes_outputs(self, tmp_path, capsys):
        rc = cli.main(["train", self._run_cfg(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "out" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,train_loss,train_acc,alpha,beta,gamma"
        assert len(lines) == 1 + 2  # header + one row per epoch
        assert (tmp_path / "out" / "final.ckpt").exists()
        out = capsys.readouterr().out
        assert "train_accuracy=" in out

    def test_train_deterministic_checkpoints(self, tmp_path):
        cfg1 = _write(tmp_path, SMALL_RUN + f"out.dir = {tmp_path}/o1\n", "a.cfg")
        cfg2 = _write(tmp_path, SMALL_RUN + f"out.dir = {tmp_path}/o2\n", "b.cfg")
        assert cli.main(["train", cfg1]) == 0
        assert cli.main(["train", cfg2]) == 0
        h1 = hashlib.sha256((tmp_path / "o1" / "final.ckpt").read_bytes()).hexdigest()
        h2 = hashlib.sha256((tmp_path / "o2" / "final.ckpt").read_bytes()).hexdigest()
        assert h1 == h2

    def test_unknown_key_exit_1(self, tmp_path, capsys):
        rc = cli.main(["train", _write(tmp_path, "pns.mode = fixed\n")])
        assert rc == 1
        assert "unknown key" in capsys.readouterr().err

    def test_missing_idx_file_exit_2(self, tmp_path):
        cfg = _write(tmp_path, "data.source = idx\ndata.images = /nope.idx\ndata.labels = /nope2.idx\n")
        assert cli.main(["train", cfg]) == 2

    def test_eval_classify(self, tmp_path, capsys):
        cfg = self._run_cfg(tmp_path)
        cli.main(["train", cfg])
        capsys.readouterr()
        rc = cli.main(["eval", f"{tmp_path}/out/final.ckpt", cfg, "--classify"])
        assert rc == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith("classification_accuracy=")
        assert 0.0 <= float(out.split("=")[1]) <= 1.0

    def test_eval_pairs(self, tmp_path, capsys):
        cfg = self._run_cfg(tmp_path)
        cli.main(["train", cfg])
        pairs = tmp_path / "pairs.txt"
        pos = [f"{i} {i + 1} 1" for i in range(10)]
        neg = [f"{i} {i + 30} 0" for i in range(10)]
        pairs.write_text("\n".join(pos + neg) + "\n")
        capsys.readouterr()
        rc = cli.main(["eval", f"{tmp_path}/out/final.ckpt", cfg, "--pairs", str(pairs)])
        assert rc == 0
        assert "verification_accuracy=" in capsys.readouterr().out

    def test_eval_corrupt_checkpoint_exit_2(self, tmp_path):
        cfg = self._run_cfg(tmp_path)
        cli.main(["train", cfg])
        blob = bytearray((tmp_path / "out" / "final.ckpt").read_bytes())
        blob[50] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        assert cli.main(["eval", str(bad), cfg, "--classify"]) == 2

    def test_eval_shape_mismatch_exit_1(self, tmp_path):
        cfg = self._run_cfg(tmp_path)
        cli.main(["train", cfg])
        other = _write(
            tmp_path,
            SMALL_RUN.replace("model.embedding_dim = 8", "model.embedding_dim = 12")
            + f"out.dir = {tmp_path}/out\n",
            "other.cfg",
        )
        assert cli.main(["eval", f"{tmp_path}/out/final.ckpt", other, "--classify"]) == 1

    def test_eval_bad_pairs_index_exit_2(self, tmp_path):
        cfg = self._run_cfg(tmp_path)
        cli.main(["train", cfg])
        pairs = tmp_path / "pairs.txt"
        pairs.write_text("0 999999 1\n")
        assert cli.main(["eval", f"{tmp_path}/out/final.ckpt", cfg, "--pairs", str(pairs)]) == 2

    def test_gradcheck_psn_exit_0(self, capsys):
        assert cli.main(["gradcheck", "--scope", "psn"]) == 0
        out = capsys.readouterr().out
        assert "max_rel_err" in out and "FAIL" not in out

    def test_gradcheck_broken_suite_exit_4(self, monkeypatch, capsys):
        # negative control: a wrong-sign derivative must trip the gate
        monkeypatch.setattr(cli, "run_psn_suite", lambda: [("psn/broken_sign", 0.5, 1e-6)])
        assert cli.main(["gradcheck", "--scope", "psn"]) == 4
        assert "psn/broken_sign" in capsys.readouterr().err


class TestAblate:
    def test_all_modes(self, tmp_path, capsys):
        cfg = _write(
            tmp_path,
            SMALL_RUN.replace("data.per_class = 25", "data.per_class = 12")
            + f"out.dir = {tmp_path}/abl\n",
        )
        rc = cli.main(["ablate", cfg, "--modes", "all"])
        assert rc == 0
        lines = (tmp_path / "abl" / "ablation.csv").read_text().strip().splitlines()
        assert lines[0] == "mode,train_acc,eval_acc,alpha,beta,gamma"
        assert len(lines) == 1 + 7
        by_mode = {l.split(",")[0]: l.split(",") for l in lines[1:]}
        assert by_mode["disabled"][3:] == ["", "", ""]
        assert [float(v) for v in by_mode["fixed"][3:]] == [1.0, 20.0, 1.0]
        for mode in PsnMode:
            assert (tmp_path / "abl" / mode.value / "final.ckpt").exists()

    def test_mode_subset_and_bad_name(self, tmp_path):
        cfg = _write(tmp_path, SMALL_RUN + f"out.dir = {tmp_path}/abl2\n")
        assert cli.main(["ablate", cfg, "--modes", "disabled,fixed"]) == 0
        lines = (tmp_path / "abl2" / "ablation.csv").read_text().strip().splitlines()
        assert len(lines) == 3
        assert cli.main(["ablate", cfg, "--modes", "nope"]) == 1
