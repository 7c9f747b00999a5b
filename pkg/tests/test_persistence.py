import numpy as np
import pandas as pd
import pytest

from mtdnet.core.errors import CheckpointError
from mtdnet.core.network import ablation_build, build
from mtdnet.models import AblationVariant, CmcCurve
from mtdnet.services.persistence import (
    LOSS_COLUMNS,
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_cmc,
    save_checkpoint,
    summary_line,
    write_cmc,
    write_loss_history,
)


@pytest.fixture
def checkpoint(tiny_cfg):
    return build(tiny_cfg, seed=3).to_checkpoint(epoch=7)


class TestCheckpointCodec:
    def test_round_trip_is_bitwise(self, checkpoint):
        decoded = decode_checkpoint(encode_checkpoint(checkpoint))
        assert decoded.net_config == checkpoint.net_config
        assert (decoded.seed, decoded.epoch, decoded.variant) == (3, 7, AblationVariant.FULL)
        assert list(decoded.params) == list(checkpoint.params)
        for name, value in checkpoint.params.items():
            np.testing.assert_array_equal(decoded.params[name], value)
            assert decoded.params[name].dtype == np.float32

    def test_variant_survives(self, tiny_cfg):
        ckpt = ablation_build(tiny_cfg, "rnk-only").to_checkpoint()
        assert decode_checkpoint(encode_checkpoint(ckpt)).variant == AblationVariant.RNK_ONLY

    def test_bad_magic(self, checkpoint):
        data = b"NOTMTDNT" + encode_checkpoint(checkpoint)[len(MAGIC):]
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_checkpoint(data)

    def test_truncated(self, checkpoint):
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(encode_checkpoint(checkpoint)[:-3])

    def test_trailing_bytes(self, checkpoint):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(encode_checkpoint(checkpoint) + b"\x00\x00")

    def test_garbled_header(self, checkpoint):
        data = bytearray(encode_checkpoint(checkpoint))
        data[len(MAGIC) + 4] = ord("#")
        with pytest.raises(CheckpointError, match="header"):
            decode_checkpoint(bytes(data))


class TestCheckpointFiles:
    def test_save_and_load(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "run" / "checkpoint.mtd")
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.params["fc8.weight"], checkpoint.params["fc8.weight"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "none.mtd")

    def test_mismatched_network_rejected(self, checkpoint, tmp_path, tiny_cfg):
        path = save_checkpoint(checkpoint, tmp_path / "c.mtd")
        with pytest.raises(CheckpointError, match="embed"):
            load_checkpoint(path, expected=tiny_cfg.model_copy(update={"embed_dim": 4}))

    def test_unexpected_parameter_rejected(self, checkpoint, tmp_path):
        checkpoint.params["extra.weight"] = np.zeros(2, dtype=np.float32)
        with pytest.raises(CheckpointError, match="extra.weight"):
            save_checkpoint(checkpoint, tmp_path / "c.mtd")

    def test_missing_parameter_rejected(self, checkpoint, tmp_path):
        del checkpoint.params["conv1.bias"]
        with pytest.raises(CheckpointError, match="lacks parameter 'conv1.bias'"):
            save_checkpoint(checkpoint, tmp_path / "c.mtd")


class TestCsvOutputs:
    def test_cmc_file(self, tmp_path):
        curve = CmcCurve(accuracies=np.array([0.25, 0.75, 1.0]), n_queries=4, gallery_size=3)
        ranks, accuracies = read_cmc(write_cmc(curve, tmp_path / "cmc.csv"))
        assert ranks.tolist() == [1, 2, 3]
        np.testing.assert_allclose(accuracies, [0.25, 0.75, 1.0])

    def test_loss_history_columns(self, tmp_path):
        history = pd.DataFrame([{"epoch": 0, "l_trp": 0.5, "l_cls": 0.7, "combined": 1.2}])
        frame = pd.read_csv(write_loss_history(history, tmp_path / "loss.csv"))
        assert list(frame.columns) == LOSS_COLUMNS
        assert frame["combined"].tolist() == [1.2]

    def test_summary_line(self):
        curve = CmcCurve(accuracies=np.array([0.625] + [0.9375] * 4 + [1.0] * 5), n_queries=16, gallery_size=10)
        assert summary_line(curve) == "rank-1 0.6250 | rank-5 0.9375 | rank-10 1.0000"
