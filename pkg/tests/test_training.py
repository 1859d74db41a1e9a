import math
import zipfile

import numpy as np
import pytest
import torch

from swintempo.errors import ChecksumError, ConfigError, IncompatibleCheckpointError, TrainingError, ValidationError
from swintempo.model import ModelConfig, SwinTempo, Variant
from swintempo.training import (
    AffineParams,
    AugmentConfig,
    Checkpoint,
    TrainConfig,
    apply_affine,
    augment,
    bce_loss,
    checkpoint_digest,
    load_checkpoint,
    make_optimizer,
    prepare_volumes,
    save_checkpoint,
    train,
)
from swintempo.volume_io import Dataset


class TestBCE:
    def test_ln2(self):
        v = bce_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
        assert abs(v.item() - 0.693147) < 1e-6
        assert abs(v.item() - math.log(2)) < 1e-12

    def test_minus_ln_01(self):
        v = bce_loss(torch.tensor([0.9], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
        assert abs(v.item() - 2.302585) < 1e-6

    def test_perfect_prediction(self):
        v = bce_loss(torch.tensor([1.0 - 1e-7], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
        assert 0 <= v.item() < 1e-6

    def test_clamped_extremes_finite(self):
        v = bce_loss(torch.tensor([0.0, 1.0], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert torch.isfinite(v)
        assert abs(v.item() + math.log(1e-7)) < 1e-9

    def test_mean_over_pixels(self):
        p = torch.tensor([[0.5, 0.9]], dtype=torch.float64)
        y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert abs(bce_loss(p, y).item() - (math.log(2) - math.log(0.1)) / 2) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            bce_loss(torch.zeros(2, 2), torch.zeros(4))

    def test_logit_gradient_identity(self):
        g = torch.Generator().manual_seed(0)
        x = (torch.randn(64, generator=g, dtype=torch.float64) * 3).requires_grad_()
        y = (torch.rand(64, generator=g, dtype=torch.float64) > 0.5).double()
        bce_loss(torch.sigmoid(x), y).backward()
        analytic = x.grad * x.numel()
        assert (analytic - (torch.sigmoid(x) - y)).abs().max() < 1e-6
        # and against central differences of the per-pixel loss
        h = 1e-6
        with torch.no_grad():
            for i in range(8):
                xp, xm = x.clone(), x.clone()
                xp[i] += h
                xm[i] -= h
                fd = (bce_loss(torch.sigmoid(xp), y) - bce_loss(torch.sigmoid(xm), y)) / (2 * h) * x.numel()
                assert abs(fd - analytic[i]) < 1e-6


class TestAugment:
    def _disc(self, H=32, W=32, cy=14, cx=12, r=4):
        yy, xx = np.mgrid[:H, :W]
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)

    def test_zero_ranges_identity(self, rng):
        s = rng.normal(size=(3, 32, 32)).astype(np.float32)
        t = (rng.random((3, 32, 32)) > 0.8).astype(np.uint8)
        s2, t2 = augment(s, t, np.random.default_rng(0), AugmentConfig.none())
        assert np.array_equal(s, s2) and np.array_equal(t, t2)
        s3, t3 = apply_affine(s, t, AffineParams())
        assert np.array_equal(s, s3) and np.array_equal(t, t3)

    def test_translation_shifts_centroid(self, rng):
        t = self._disc()
        s = rng.normal(size=t.shape).astype(np.float32)
        _, t2 = apply_affine(s, t, AffineParams(translate_xy=(5.0, 0.0)))
        ys, xs = np.nonzero(t)
        ys2, xs2 = np.nonzero(t2)
        assert len(xs2) == len(xs)
        assert xs2.mean() - xs.mean() == 5.0 and ys2.mean() == ys.mean()

    def test_brightness_offset(self, rng):
        s = rng.normal(size=(2, 16, 16))
        t = (rng.random((2, 16, 16)) > 0.5).astype(np.uint8)
        s2, t2 = apply_affine(s, t, AffineParams(brightness=0.1))
        np.testing.assert_allclose(s2 - s, 0.1, rtol=0, atol=1e-12)
        assert np.array_equal(t, t2)

    def test_binarity_and_determinism(self, rng):
        s = rng.normal(size=(4, 32, 32)).astype(np.float32)
        t = np.stack([self._disc(cy=10 + i) for i in range(4)])
        for seed in range(10):
            a = augment(s, t, np.random.default_rng(seed))
            b = augment(s, t, np.random.default_rng(seed))
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            assert set(np.unique(a[1])) <= {0, 1}
            assert a[0].dtype == s.dtype and a[1].dtype == t.dtype

    def test_same_warp_for_every_slice(self, rng):
        t = np.stack([self._disc()] * 3)
        s = np.stack([rng.normal(size=(32, 32))] * 3)
        s2, t2 = augment(s, t, np.random.default_rng(4))
        assert np.array_equal(t2[0], t2[2]) and np.array_equal(s2[0], s2[1])


class TestOptimizer:
    def test_zero_gradient_decay(self):
        m = SwinTempo(ModelConfig.tiny(Variant.BASELINE_UNET)).double()
        cfg = TrainConfig(variant="baseline_unet", learning_rate=1e-2, weight_decay=1e-1)
        opt = make_optimizer(m, cfg)
        before = [p.detach().clone() for p in m.parameters()]
        for p in m.parameters():
            p.grad = torch.zeros_like(p)
        for step in range(1, 4):
            opt.step()
            for p0, p in zip(before, m.parameters()):
                expected = p0 * (1 - 1e-2 * 1e-1) ** step
                assert torch.allclose(p, expected, rtol=1e-12, atol=0)
                assert torch.equal(torch.sign(p), torch.sign(p0))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()


@pytest.fixture(scope="module")
def train_data(phantom_items):
    return prepare_volumes(Dataset.from_items(phantom_items), 64)


def _cfg(variant="swin_tempo", epochs=5, **kw):
    kw.setdefault("learning_rate", 2e-3)
    return TrainConfig(variant=variant, epochs=epochs, slices_per_step=4, seed=3, **kw)


class TestTrain:
    def test_targets_on_model_grid(self, train_data):
        assert len(train_data) == 2
        for v in train_data:
            assert v.slices.shape == v.labels.shape == (16, 64, 64)
            assert v.labels.any()

    def test_loss_decreases(self, train_data, tmp_path):
        ckpt = train(train_data, _cfg(), out_dir=tmp_path)
        rows = ckpt.history
        epochs = sorted({e for _, e, _ in rows})
        assert len(epochs) == 5
        means = [np.mean([l for _, e, l in rows if e == ep]) for ep in epochs]
        assert means[-1] < means[0]
        log = (tmp_path / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,epoch,loss" and len(log) == len(rows) + 1
        assert (tmp_path / "checkpoint.zip").exists()
        assert ckpt.loss == min(means)

    def test_seed_determinism(self, train_data, tmp_path):
        a = train(train_data, _cfg(epochs=1), out_dir=tmp_path / "a")
        b = train(train_data, _cfg(epochs=1), out_dir=tmp_path / "b")
        assert checkpoint_digest(tmp_path / "a/checkpoint.zip") == checkpoint_digest(tmp_path / "b/checkpoint.zip")
        assert a.history == b.history

    def test_baseline_has_no_attention_or_gates(self, train_data):
        ckpt = train(train_data[:1], _cfg("baseline_unet", epochs=1))
        names = list(ckpt.model_state)
        assert not any(n.startswith(("swin.", "gru.")) for n in names)
        assert not any("attn" in n or "conv_z" in n for n in names)

    def test_variant_mismatch(self, train_data):
        with pytest.raises(ConfigError):
            train(train_data, _cfg("swin_tempo"), model_config=ModelConfig.tiny("baseline_unet"))

    def test_non_finite_loss(self, train_data):
        bad = [type(train_data[0])("bad", np.full_like(train_data[0].slices, np.nan), train_data[0].labels)]
        with pytest.raises(TrainingError, match="series bad"):
            train(bad, _cfg("baseline_unet", epochs=1, augment=AugmentConfig.none()))


class TestCheckpoint:
    def _ckpt(self, variant="swin_tempo"):
        torch.manual_seed(1)
        m = SwinTempo(ModelConfig.tiny(variant))
        opt = make_optimizer(m, _cfg(variant))
        x = torch.randn(1, 2, 64, 64)
        m(x)[0].mean().backward()
        opt.step()
        return m, Checkpoint.from_model(m, optimizer_state=opt.state_dict(), train_config=_cfg(variant).to_dict(), epoch=2, loss=0.5)

    def test_round_trip_bit_exact(self, tmp_path):
        m, ck = self._ckpt()
        save_checkpoint(ck, tmp_path / "c.zip")
        loaded = load_checkpoint(tmp_path / "c.zip", expected="swin_tempo")
        x = torch.randn(1, 3, 64, 64)
        m.eval()
        with torch.no_grad():
            assert torch.equal(m(x)[0], loaded.build_model()(x)[0])
        assert loaded.epoch == 2 and loaded.loss == 0.5
        opt = make_optimizer(loaded.build_model(), _cfg())
        opt.load_state_dict(loaded.optimizer_state)
        for k, st in ck.optimizer_state["state"].items():
            for name, val in st.items():
                assert torch.equal(torch.as_tensor(val), loaded.optimizer_state["state"][k][name])

    def test_save_is_deterministic(self, tmp_path):
        _, ck = self._ckpt()
        save_checkpoint(ck, tmp_path / "a.zip")
        save_checkpoint(ck, tmp_path / "b.zip")
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()

    def test_corruption_detected(self, tmp_path):
        _, ck = self._ckpt()
        path = save_checkpoint(ck, tmp_path / "c.zip")
        with zipfile.ZipFile(path) as zf:
            info = zf.getinfo("tensors/00003.bin")
        raw = bytearray(path.read_bytes())
        # flip a byte inside the payload of one tensor (stored, uncompressed)
        pos = info.header_offset + 30 + len(info.filename) + len(info.extra) + 2
        raw[pos] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        _, ck = self._ckpt()
        path = save_checkpoint(ck, tmp_path / "c.zip")
        path.write_bytes(path.read_bytes()[:200])
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_variant_mismatch(self, tmp_path):
        _, ck = self._ckpt("swin_enhanced")
        path = save_checkpoint(ck, tmp_path / "c.zip")
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expected="swin_tempo")
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expected=ModelConfig.full("swin_enhanced"))
        assert load_checkpoint(path, expected=ModelConfig.tiny("swin_enhanced")).model_config.variant is Variant.SWIN_ENHANCED

    def test_version_mismatch(self, tmp_path):
        _, ck = self._ckpt()
        path = save_checkpoint(ck, tmp_path / "c.zip")
        with zipfile.ZipFile(path) as zf:
            files = {n: zf.read(n) for n in zf.namelist()}
        files["manifest.json"] = files["manifest.json"].replace(b'"version": 1', b'"version": 99')
        with zipfile.ZipFile(path, "w") as zf:
            for n, data in files.items():
                zf.writestr(n, data)
        with pytest.raises(IncompatibleCheckpointError, match="version 99"):
            load_checkpoint(path)
