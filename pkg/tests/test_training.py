"""Encoder, synthetic benchmark, optimizer, train loop, checkpoints."""
from __future__ import annotations

import numpy as np
import pytest

import freqad.autograd as ag
import freqad.evalio as evalio
import freqad.pipeline as pl
import freqad.training as tr
from freqad.numerics import NumericsError

# =====================================================================
# stub encoder
# =====================================================================


class TestStubEncoder:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        img = rng.random((64, 64))
        feat = tr.stub_encoder(img, channels=16, patch=8)
        assert feat.shape == (16, 8, 8)
        assert feat.dtype == np.float64

    def test_constant_image_hits_only_mean_channel(self):
        img = np.full((32, 32), 0.375)
        feat = tr.stub_encoder(img, channels=16, patch=8)
        assert np.allclose(feat[0], 0.375, atol=1e-12)
        assert np.abs(feat[1:]).max() < 1e-10

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        img = rng.random((64, 64))
        a = tr.stub_encoder(img)
        b = tr.stub_encoder(img)
        assert np.array_equal(a, b)

    def test_linear_channels_are_additive(self):
        rng = np.random.default_rng(4)
        a = rng.random((32, 32))
        b = rng.random((32, 32))
        fa = tr.stub_encoder(a, channels=16, patch=8)
        fb = tr.stub_encoder(b, channels=16, patch=8)
        fab = tr.stub_encoder(a + b, channels=16, patch=8)
        linear = [c for c in range(16) if c != 8]
        assert np.allclose(fab[linear], fa[linear] + fb[linear], atol=1e-10)

    def test_x_ramp_excites_x_gradient_channel(self):
        img = np.tile(np.linspace(0.0, 1.0, 32), (32, 1))
        feat = tr.stub_encoder(img, channels=16, patch=8)
        assert np.abs(feat[1]).min() > 1e-3   # x gradient everywhere
        assert np.abs(feat[2]).max() < 1e-10  # no y gradient

    def test_std_channel_matches_patch_std(self):
        rng = np.random.default_rng(5)
        img = rng.random((16, 16))
        feat = tr.stub_encoder(img, channels=16, patch=8)
        blocks = img.reshape(2, 8, 2, 8).transpose(0, 2, 1, 3)
        assert np.allclose(feat[8], blocks.std(axis=(2, 3)), atol=1e-12)

    def test_small_channel_count_is_a_prefix(self):
        rng = np.random.default_rng(6)
        img = rng.random((32, 32))
        f8 = tr.stub_encoder(img, channels=8, patch=8)
        f16 = tr.stub_encoder(img, channels=16, patch=8)
        assert np.allclose(f8, f16[:8], atol=1e-12)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            tr.stub_encoder(np.zeros((30, 32)), patch=8)
        with pytest.raises(ValueError):
            tr.stub_encoder(np.zeros((3, 32, 32)), patch=8)


# =====================================================================
# synthetic benchmark
# =====================================================================


class TestSynthDataset:
    def test_deterministic(self):
        a = tr.synth_dataset(4, classes=2, size=32, seed=11)
        b = tr.synth_dataset(4, classes=2, size=32, seed=11)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.mask, sb.mask)

    def test_layout_and_ranges(self):
        data = tr.synth_dataset(6, classes=3, size=32, anomaly_fraction=0.5, seed=1)
        assert len(data) == 18
        for s in data:
            assert s.image.shape == (32, 32)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            assert s.mask.shape == (32, 32)
        by_class = [data[i * 6 : (i + 1) * 6] for i in range(3)]
        for cls, group in enumerate(by_class):
            assert [s.class_id for s in group] == [cls] * 6
            assert [s.is_anomalous for s in group] == [False] * 3 + [True] * 3

    def test_normals_have_empty_masks(self):
        data = tr.synth_dataset(4, classes=2, size=32, seed=2)
        for s in data:
            if not s.is_anomalous:
                assert s.mask.sum() == 0
            else:
                assert s.mask.sum() > 0

    def test_defect_is_confined_to_its_mask(self):
        """A sample and its clean twin agree exactly outside the mask."""
        for cls in range(3):
            for idx in range(4):
                dirty = tr.make_sample(7, cls, idx, 64, 3, anomalous=True)
                clean = tr.make_sample(7, cls, idx, 64, 3, anomalous=False)
                out = dirty.mask == 0
                assert np.array_equal(dirty.image[out], clean.image[out])
                inside = np.abs(dirty.image - clean.image)[dirty.mask == 1]
                assert inside.mean() > 0.03

    def test_classes_look_different(self):
        imgs = [tr.make_sample(0, c, 0, 64, 4, False).image for c in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.abs(imgs[i] - imgs[j]).mean() > 0.05

    def test_fraction_validation(self):
        with pytest.raises(ValueError):
            tr.synth_dataset(4, classes=1, anomaly_fraction=1.5)


class TestPatchMask:
    def test_single_pixel(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[9, 17] = 1
        pm = tr.patch_mask_from_pixels(mask, 8)
        expect = np.zeros((4, 4), dtype=bool)
        expect[1, 2] = True
        assert np.array_equal(pm, expect)

    def test_empty(self):
        pm = tr.patch_mask_from_pixels(np.zeros((16, 16), dtype=np.uint8), 8)
        assert pm.shape == (2, 2)
        assert not pm.any()

    def test_rejects_misaligned(self):
        with pytest.raises(ValueError):
            tr.patch_mask_from_pixels(np.zeros((30, 32)), 8)


# =====================================================================
# gradients and Adam
# =====================================================================


def tiny_setup(seed=0, n=4, channels=8):
    cfg = pl.ModelConfig(channels=channels, rank=2)
    model = pl.Model(cfg, np.random.default_rng(seed))
    data = tr.synth_dataset(n, classes=2, size=64, anomaly_fraction=0.5, seed=seed)
    feats = tr.featurize(data, channels, 8)
    return model, feats


class TestGrad:
    def test_covers_every_parameter_and_is_finite(self):
        model, feats = tiny_setup()
        loss, grads, terms = tr.grad(model, feats[:4], pl.LossWeights())
        assert np.isfinite(loss)
        assert set(grads) == set(model.params.names)
        for g in grads.values():
            assert np.isfinite(g).all()
        assert set(terms) == set(pl.TERM_NAMES)

    def test_matches_finite_differences_at_sampled_indices(self):
        model, feats = tiny_setup(seed=1, n=2)
        batch = feats[:2] + feats[2:4]
        weights = pl.LossWeights()
        _, grads, _ = tr.grad(model, batch, weights)
        flat = np.concatenate([grads[p.name].reshape(-1) for p in model.params])
        rng = np.random.default_rng(9)
        picks = rng.choice(model.params.size, size=12, replace=False)
        for i in picks:
            fd = tr.finite_diff(model, batch, weights, int(i))
            assert abs(flat[i] - fd) < 1e-4 * max(abs(fd), abs(flat[i])) + 1e-7

    def test_finite_diff_restores_parameters(self):
        model, feats = tiny_setup(seed=2, n=2)
        before = model.params.to_vector()
        tr.finite_diff(model, feats[:2], pl.LossWeights(), 5)
        assert np.array_equal(model.params.to_vector(), before)


class TestAdam:
    def test_first_step_is_sign_scaled(self):
        p = ag.Parameter("w", np.array([1.0, -2.0, 3.0]))
        reg = ag.ParamRegistry([p])
        state = tr.OptimState.init(reg)
        g = np.array([0.5, -0.25, 1.0e-3])
        before = p.value.copy()
        tr.adam_step(reg, {"w": g}, state, lr=1e-2, eps=1e-8)
        expect = before - 1e-2 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.value, expect, atol=1e-12)
        assert state.step == 1

    def test_two_steps_match_reference_recurrence(self):
        rng = np.random.default_rng(3)
        p = ag.Parameter("w", rng.normal(size=(4,)))
        reg = ag.ParamRegistry([p])
        state = tr.OptimState.init(reg)
        theta = p.value.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        for t in (1, 2):
            g = rng.normal(size=(4,))
            tr.adam_step(reg, {"w": g}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert np.allclose(p.value, theta, atol=1e-14)
        assert np.allclose(state.m["w"], m, atol=1e-14)
        assert np.allclose(state.v["w"], v, atol=1e-14)


# =====================================================================
# train loop
# =====================================================================


class TestTrainLoop:
    def test_runs_and_logs_history(self):
        model, feats = tiny_setup(seed=4, n=4)
        settings = tr.TrainSettings(steps=6, batch_size=4, seed=4)
        rows = []
        result = tr.train(model, feats, feats[:4], settings, pl.LossWeights(),
                          pixel_hw=(64, 64), log=rows.append)
        assert result.history == rows
        assert result.history[-1]["step"] == 6
        for row in result.history:
            assert np.isfinite(row["loss"])
            assert 0.0 <= row["P_ROC"] <= 1.0
            assert 0.0 <= row["I_ROC"] <= 1.0
        assert set(result.final_metrics) == {"P_ROC", "I_ROC", "P_PR", "I_PR"}

    def test_bitwise_deterministic(self):
        def run():
            model, feats = tiny_setup(seed=5, n=4)
            settings = tr.TrainSettings(steps=4, batch_size=4, seed=5)
            result = tr.train(model, feats, [], settings, pl.LossWeights(),
                              pixel_hw=(64, 64))
            return result.model.params.to_vector(), result.history

        v1, h1 = run()
        v2, h2 = run()
        assert np.array_equal(v1, v2)
        assert h1 == h2

    def test_updates_move_parameters(self):
        model, feats = tiny_setup(seed=6, n=4)
        before = model.params.to_vector()
        settings = tr.TrainSettings(steps=2, batch_size=4, seed=6)
        tr.train(model, feats, [], settings, pl.LossWeights(), pixel_hw=(64, 64))
        assert not np.array_equal(model.params.to_vector(), before)


class TestEvaluateModel:
    def test_metric_keys_and_ranges(self):
        model, feats = tiny_setup(seed=7, n=4)
        metrics = tr.evaluate_model(model, feats, pixel_hw=(64, 64))
        assert set(metrics) == {"P_ROC", "I_ROC", "P_PR", "I_PR"}
        for v in metrics.values():
            assert 0.0 <= v <= 1.0


# =====================================================================
# checkpoints
# =====================================================================


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model, feats = tiny_setup(seed=8, n=4)
        settings = tr.TrainSettings(steps=2, batch_size=4, seed=8)
        result = tr.train(model, feats, [], settings, pl.LossWeights(), pixel_hw=(64, 64))
        path = tmp_path / "ckpt.bin"
        tr.save_checkpoint(path, model, result.optim, "channels=8\nseed=8\n")

        fresh = pl.Model(pl.ModelConfig(channels=8, rank=2), np.random.default_rng(999))
        records, config_text = tr.load_checkpoint_records(path)
        assert config_text == "channels=8\nseed=8\n"
        optim = tr.restore_model(fresh, records)
        assert np.array_equal(fresh.params.to_vector(), model.params.to_vector())
        assert optim.step == result.optim.step
        for name in optim.m:
            assert np.array_equal(optim.m[name], result.optim.m[name])
            assert np.array_equal(optim.v[name], result.optim.v[name])

    def test_restored_model_scores_identically(self, tmp_path):
        model, feats = tiny_setup(seed=9, n=2)
        path = tmp_path / "ckpt.bin"
        tr.save_checkpoint(path, model, tr.OptimState.init(model.params), "x=1\n")
        fresh = pl.Model(pl.ModelConfig(channels=8, rank=2), np.random.default_rng(111))
        records, _ = tr.load_checkpoint_records(path)
        tr.restore_model(fresh, records)
        a = model.score(feats[0].feat, pixel_hw=(64, 64))
        b = fresh.score(feats[0].feat, pixel_hw=(64, 64))
        assert np.array_equal(a.patch_scores, b.patch_scores)
        assert a.image_score == b.image_score

    def test_missing_parameter_record_raises(self, tmp_path):
        model, _ = tiny_setup(seed=10, n=2)
        path = tmp_path / "ckpt.bin"
        tr.save_checkpoint(path, model, tr.OptimState.init(model.params), "x=1\n")
        records, _ = tr.load_checkpoint_records(path)
        name = next(iter(model.params)).name
        del records[f"param/{name}"]
        with pytest.raises(evalio.ContainerError):
            tr.restore_model(model, records)

    def test_shape_mismatch_raises(self, tmp_path):
        model, _ = tiny_setup(seed=11, n=2)
        path = tmp_path / "ckpt.bin"
        tr.save_checkpoint(path, model, tr.OptimState.init(model.params), "x=1\n")
        records, _ = tr.load_checkpoint_records(path)
        other = pl.Model(pl.ModelConfig(channels=4, rank=2), np.random.default_rng(0))
        with pytest.raises(evalio.ContainerError):
            tr.restore_model(other, records)

    def test_missing_config_raises(self, tmp_path):
        path = tmp_path / "bad.bin"
        evalio.write_container(path, [("param/x", np.zeros(3))])
        with pytest.raises(evalio.ContainerError):
            tr.load_checkpoint_records(path)
