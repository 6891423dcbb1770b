import struct
import zlib

import numpy as np
import pytest

import seqhash.trainer as trainer
from seqhash.datagen import SyntheticSpec, generate
from seqhash.errors import ConfigError, CorruptFile, MagicMismatch, NumericError, ShapeError, VersionMismatch
from seqhash.neighborhood import NeighborGraph, build_graph, mean_pool
from seqhash.recurrent import LstmParams
from seqhash.retrieval import hash_dataset
from seqhash.trainer import (
    Checkpoint,
    TrainConfig,
    checkpoint_bytes,
    learning_rate_at,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    total_loss,
    train,
)


def tiny_cfg(**kw):
    base = dict(code_len=8, frames=4, hidden1=6, hidden2=6, batch_size=4, epochs=1, seed=0, learning_rate=0.05)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_data():
    ds = generate(SyntheticSpec(n_videos=8, n_clusters=2, frames=4, dim=5, seed=42))
    return ds, build_graph(mean_pool(ds.features), 2, 1)


class TestTotalLoss:
    def test_examples(self):
        assert total_loss(5.0, 99.0, 1.0) == 5.0
        assert total_loss(5.0, 99.0, 0.0) == 99.0
        assert total_loss(2.0, 4.0, 0.5) == 3.0

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_out_of_range(self, lam):
        with pytest.raises(ConfigError):
            total_loss(1.0, 1.0, lam)


class TestSgdStep:
    def test_scalar_example(self):
        p = LstmParams(W=np.ones((1, 4)), U=np.ones((1, 4)), bias=np.ones(4))
        g = LstmParams(W=np.full((1, 4), 0.5), U=np.zeros((1, 4)), bias=np.zeros(4))
        sgd_step(p, g, 0.1)
        np.testing.assert_allclose(p.W, 0.95)
        np.testing.assert_array_equal(p.U, 1.0)

    def test_zero_lr_or_grads(self):
        rng = np.random.default_rng(0)
        p = LstmParams.init(2, 3, rng)
        before = p.copy()
        sgd_step(p, p.copy(), 0.0)
        sgd_step(p, p.zeros_like(), 0.3)
        for (_, a), (_, b) in zip(p.named_arrays(), before.named_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            sgd_step(LstmParams.init(2, 3, rng), LstmParams.init(2, 4, rng), 0.1)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(lam=2.0),
            dict(eta=-1.0),
            dict(learning_rate=0.0),
            dict(batch_size=1),
            dict(activation="relu"),
            dict(frames=5, stride=2),
            dict(code_len=0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lam, cfg.eta, cfg.stride, cfg.frames, cfg.batch_size, cfg.k1, cfg.k2) == (0.001, 0.2, 2, 24, 256, 20, 10)

    def test_dict_round_trip(self):
        cfg = tiny_cfg(activation="tanh_relax")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_schedule(self):
        cfg = TrainConfig(learning_rate=1.0, epochs=30)
        assert [learning_rate_at(cfg, e) for e in (0, 9, 10, 19, 20, 29)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


class TestTrain:
    def test_bit_identical_history(self, tiny_data):
        ds, g = tiny_data
        _, h1 = train(ds.features, g, tiny_cfg())
        _, h2 = train(ds.features, g, tiny_cfg())
        assert h1 == h2

    def test_decomposition_identity(self, tiny_data):
        ds, g = tiny_data
        _, hist = train(ds.features, g, tiny_cfg(epochs=3, lam=0.3))
        for r in hist:
            assert abs(r.total - (0.3 * r.recon + 0.7 * r.neighbor)) <= 1e-12

    def test_lambda_one_total_is_recon(self, tiny_data):
        ds, g = tiny_data
        _, hist = train(ds.features, g, tiny_cfg(epochs=2, lam=1.0))
        assert all(r.total == r.recon for r in hist)

    def test_batch_capped_at_dataset(self, tiny_data):
        ds, g = tiny_data
        ck, _ = train(ds.features, g, tiny_cfg(batch_size=256))
        assert ck.epoch == 1

    def test_repeated_video_reconstruction_descends(self):
        v = np.random.default_rng(0).standard_normal((1, 4, 3))
        x = np.repeat(v, 4, axis=0)
        g = NeighborGraph(4, [np.array([j for j in range(4) if j != i]) for i in range(4)])
        cfg = TrainConfig(code_len=8, frames=4, hidden1=8, hidden2=8, lam=1.0, learning_rate=0.05, lr_decay=1.0, batch_size=4, epochs=200)
        _, hist = train(x, g, cfg)
        recon = [r.recon for r in hist]
        assert recon[-1] < 0.1 * recon[0]
        increases = sum(b > a for a, b in zip(recon, recon[1:]))
        assert increases <= 0.05 * len(recon)

    def test_neighbor_only_training_separates_clusters(self):
        ds = generate(SyntheticSpec(n_videos=40, n_clusters=2, frames=8, dim=16, seed=42))
        g = build_graph(mean_pool(ds.features), 5, 5)
        cfg = TrainConfig(code_len=16, frames=8, hidden1=16, hidden2=16, lam=0.0, batch_size=20, epochs=20)
        ck, _ = train(ds.features, g, cfg)
        c = hash_dataset(ck.model, ds.features).codes().astype(int)
        dist = (c[:, None, :] != c[None]).sum(-1)
        same = ds.labels[:, None] == ds.labels[None]
        off = ~np.eye(len(c), dtype=bool)
        assert dist[same & off].mean() < dist[~same].mean()

    def test_mismatched_inputs(self, tiny_data):
        ds, g = tiny_data
        with pytest.raises(ConfigError):
            train(ds.features, build_graph(mean_pool(ds.features[:6]), 2, 1), tiny_cfg())
        with pytest.raises(ConfigError):
            train(ds.features, g, tiny_cfg(frames=2))

    def test_non_finite_loss_names_batch_and_term(self, tiny_data, monkeypatch):
        ds, g = tiny_data
        real = trainer.neighbor_loss_batch
        monkeypatch.setattr(trainer, "neighbor_loss_batch", lambda *a: (float("nan"), real(*a)[1]))
        with pytest.raises(NumericError, match=r"epoch 0 batch 0: non-finite neighbor"):
            train(ds.features, g, tiny_cfg())

    def test_on_epoch_callback(self, tiny_data):
        ds, g = tiny_data
        seen = []
        train(ds.features, g, tiny_cfg(epochs=2), on_epoch=lambda rec, model: seen.append(rec.epoch))
        assert seen == [0, 1]

    def test_tanh_relax_trains(self, tiny_data):
        ds, g = tiny_data
        _, hist = train(ds.features, g, tiny_cfg(epochs=2, activation="tanh_relax"))
        assert all(np.isfinite(r.total) for r in hist)


class TestCheckpoint:
    def _trained(self, tiny_data, **kw):
        ds, g = tiny_data
        ck, _ = train(ds.features, g, tiny_cfg(epochs=2, **kw))
        return ds, g, ck

    def test_round_trip_encode_bit_identical(self, tmp_path, tiny_data):
        ds, _, ck = self._trained(tiny_data)
        p = tmp_path / "m.ckpt"
        save_checkpoint(ck, p)
        back = load_checkpoint(p)
        assert back.config == ck.config and back.epoch == 2 and back.history == ck.history
        np.testing.assert_array_equal(hash_dataset(back.model, ds.features).packed, hash_dataset(ck.model, ds.features).packed)
        for (n1, a), (n2, b) in zip(ck.model.named_arrays(buffers=True), back.model.named_arrays(buffers=True)):
            assert n1 == n2
            np.testing.assert_array_equal(a, b)
        assert checkpoint_bytes(back) == p.read_bytes()

    def test_truncated(self, tmp_path, tiny_data):
        _, _, ck = self._trained(tiny_data)
        p = tmp_path / "m.ckpt"
        save_checkpoint(ck, p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(CorruptFile):
            load_checkpoint(p)

    def test_bit_flip(self, tmp_path, tiny_data):
        _, _, ck = self._trained(tiny_data)
        p = tmp_path / "m.ckpt"
        data = bytearray(checkpoint_bytes(ck))
        data[len(data) // 2] ^= 0x10
        p.write_bytes(bytes(data))
        with pytest.raises(CorruptFile):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path, tiny_data):
        _, _, ck = self._trained(tiny_data)
        data = bytearray(checkpoint_bytes(ck))[:-4]
        data[9:13] = struct.pack("<I", 99)
        p = tmp_path / "m.ckpt"
        p.write_bytes(bytes(data) + struct.pack("<I", zlib.crc32(bytes(data))))
        with pytest.raises(VersionMismatch):
            load_checkpoint(p)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"SSVH-FEAT" + b"\0" * 40)
        with pytest.raises(MagicMismatch):
            load_checkpoint(p)

    def test_resume_continues_epochs(self, tiny_data):
        ds, g, ck = self._trained(tiny_data)
        ck2, hist = train(ds.features, g, tiny_cfg(epochs=3), resume=ck)
        assert [r.epoch for r in hist] == [0, 1, 2, 3, 4]
        assert ck2.epoch == 5
        assert hist[:2] == ck.history

    def test_resume_is_deterministic(self, tiny_data):
        ds, g, ck = self._trained(tiny_data)
        a, _ = train(ds.features, g, tiny_cfg(epochs=2), resume=ck)
        b, _ = train(ds.features, g, tiny_cfg(epochs=2), resume=ck)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_resume_architecture_guard(self, tiny_data):
        ds, g, ck = self._trained(tiny_data)
        with pytest.raises(ConfigError):
            train(ds.features, g, tiny_cfg(code_len=16), resume=ck)

    def test_checkpoint_dataclass_defaults(self, tiny_data):
        _, _, ck = self._trained(tiny_data)
        fresh = Checkpoint(ck.config, ck.model)
        assert fresh.epoch == 0 and fresh.history == []
