import numpy as np
import pytest

from freqad import autograd as ag
from freqad import pipeline as pl
from freqad import softgate

from gradtools import assert_grads_close, fd_param_grads


def small_model(seed=0, channels=4, rank=2, **cfg_kwargs):
    cfg = pl.ModelConfig(channels=channels, rank=rank, bias_base_h=4, bias_base_w=4, **cfg_kwargs)
    return pl.Model(cfg, np.random.default_rng(seed))


class TestPixelMap:
    def test_reference_upsample(self):
        out = pl.pixel_map(np.array([[0.0, 1.0], [0.0, 1.0]]), 4, 4)
        expect_row = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
        np.testing.assert_allclose(out, np.tile(expect_row, (4, 1)), atol=1e-12)

    def test_corners_are_reproduced(self):
        rng = np.random.default_rng(80)
        grid = rng.standard_normal((3, 5))
        out = pl.pixel_map(grid, 9, 25)
        assert out[0, 0] == pytest.approx(grid[0, 0])
        assert out[-1, -1] == pytest.approx(grid[-1, -1])
        assert out[0, -1] == pytest.approx(grid[0, -1])

    def test_same_size_is_identity(self):
        rng = np.random.default_rng(81)
        grid = rng.standard_normal((4, 4))
        np.testing.assert_allclose(pl.pixel_map(grid, 4, 4), grid, atol=1e-12)

    def test_constant_grid_stays_constant(self):
        out = pl.pixel_map(np.full((2, 2), 0.7), 8, 8)
        np.testing.assert_allclose(out, np.full((8, 8), 0.7), atol=1e-12)

    def test_single_row_broadcasts(self):
        out = pl.pixel_map(np.array([[1.0, 3.0]]), 4, 3)
        np.testing.assert_allclose(out, np.tile([1.0, 2.0, 3.0], (4, 1)), atol=1e-12)

    def test_downsampling_rejected(self):
        with pytest.raises(ValueError):
            pl.pixel_map(np.zeros((4, 4)), 2, 4)

    def test_values_stay_in_hull(self):
        rng = np.random.default_rng(82)
        grid = rng.standard_normal((4, 4))
        out = pl.pixel_map(grid, 16, 16)
        assert out.min() >= grid.min() - 1e-12
        assert out.max() <= grid.max() + 1e-12


class TestScores:
    def test_single_patch_rules(self):
        assert pl.patch_anomaly_score(np.ones(3), np.ones(3)) == pytest.approx(0.0)
        assert pl.patch_anomaly_score(np.ones(3), -np.ones(3)) == pytest.approx(2.0)
        assert pl.patch_anomaly_score(np.zeros(3), np.zeros(3)) == pytest.approx(0.0)
        assert pl.patch_anomaly_score(np.zeros(3), np.ones(3)) == pytest.approx(1.0)

    def test_map_matches_scalar_op(self):
        rng = np.random.default_rng(83)
        recon = rng.standard_normal((5, 3, 4))
        orig = rng.standard_normal((5, 3, 4))
        grid = pl.patch_score_map(recon, orig)
        assert grid.shape == (3, 4)
        for y in range(3):
            for x in range(4):
                assert grid[y, x] == pytest.approx(
                    pl.patch_anomaly_score(recon[:, y, x], orig[:, y, x]), abs=1e-12
                )
        assert np.all(grid >= 0.0) and np.all(grid <= 2.0)

    def test_zero_patch_columns(self):
        recon = np.zeros((2, 1, 2))
        orig = np.zeros((2, 1, 2))
        orig[:, 0, 1] = 1.0
        grid = pl.patch_score_map(recon, orig)
        assert grid[0, 0] == pytest.approx(0.0)  # both zero: identical
        assert grid[0, 1] == pytest.approx(1.0)  # one zero: orthogonal


class TestFusion:
    def test_identity_heads_give_exact_sum(self):
        rng = np.random.default_rng(84)
        hi = rng.standard_normal((3, 4, 4))
        lo = rng.standard_normal((3, 4, 4))
        out = pl.fuse_reconstruction(hi, lo, np.ones(3), np.ones(3))
        np.testing.assert_allclose(out.value, hi + lo, atol=1e-15)

    def test_heads_scale_per_channel(self):
        hi = np.ones((2, 2, 2))
        lo = np.ones((2, 2, 2))
        out = pl.fuse_reconstruction(hi, lo, np.array([2.0, 0.0]), np.array([0.0, 3.0]))
        np.testing.assert_allclose(out.value[0], np.full((2, 2), 2.0))
        np.testing.assert_allclose(out.value[1], np.full((2, 2), 3.0))


class TestModel:
    def test_branchless_model_reconstructs_input(self):
        model = small_model(use_fsam=False, use_gscm=False)
        feat = np.random.default_rng(85).standard_normal((4, 8, 8))
        recon = model.reconstruct(feat)
        assert np.max(np.abs(recon - feat)) < 1e-9

    def test_forward_is_deterministic(self):
        model = small_model(seed=3)
        feat = np.random.default_rng(86).standard_normal((4, 8, 8))
        a = model.reconstruct(feat)
        b = model.reconstruct(feat)
        assert np.array_equal(a, b)

    def test_ablation_flags_change_output(self):
        feat = np.random.default_rng(87).standard_normal((4, 8, 8))
        full = small_model(seed=5).reconstruct(feat)
        no_fsam = small_model(seed=5, use_fsam=False).reconstruct(feat)
        no_gscm = small_model(seed=5, use_gscm=False).reconstruct(feat)
        assert np.max(np.abs(full - no_fsam)) > 1e-9
        assert np.max(np.abs(full - no_gscm)) > 1e-9

    def test_score_on_non_power_of_two_grid(self):
        model = small_model(seed=7)
        feat = np.random.default_rng(88).standard_normal((4, 14, 14))
        amap = model.score(feat, pixel_hw=(56, 56))
        assert amap.patch_scores.shape == (14, 14)
        assert amap.pixel_scores.shape == (56, 56)
        assert np.isfinite(amap.patch_scores).all()
        assert np.isfinite(amap.pixel_scores).all()
        assert amap.image_score == pytest.approx(amap.patch_scores.max())

    def test_image_score_is_patch_max(self):
        model = small_model(seed=9)
        feat = np.random.default_rng(89).standard_normal((4, 8, 8))
        amap = model.score(feat)
        assert amap.image_score == pytest.approx(amap.patch_scores.max())
        assert amap.pixel_scores is None

    def test_config_validation(self):
        with pytest.raises(ValueError):
            pl.ModelConfig(channels=4, rank=4)
        with pytest.raises(ValueError):
            pl.ModelConfig(channels=0)


def _loss_sample(recon_value, mask, is_anom):
    recon_value = np.asarray(recon_value, dtype=np.float64)
    return pl.LossSample(
        recon=ag.constant(recon_value),
        original=np.ones_like(recon_value),
        patch_mask=None if mask is None else np.asarray(mask, dtype=bool),
        is_anomalous=is_anom,
    )


class TestLossTerms:
    def test_normal_batch_activates_only_n_cos(self):
        rng = np.random.default_rng(90)
        sample = _loss_sample(rng.standard_normal((3, 2, 2)), None, False)
        terms = pl.batch_loss_terms([sample], pl.LossWeights())
        assert float(terms["n_cos"].value) > 0.0
        for name in ("a_cos", "con", "an_cos", "far", "tri"):
            assert float(terms[name].value) == 0.0

    def test_perfect_reconstruction_zeroes_cosine_terms(self):
        orig = np.abs(np.random.default_rng(91).standard_normal((3, 2, 2))) + 0.5
        sample = pl.LossSample(ag.constant(orig), orig, None, False)
        terms = pl.batch_loss_terms([sample], pl.LossWeights())
        assert float(terms["n_cos"].value) == pytest.approx(0.0, abs=1e-9)

    def test_defective_sample_fills_the_other_terms(self):
        rng = np.random.default_rng(92)
        mask = np.zeros((2, 2), dtype=bool)
        mask[1, 1] = True
        sample = _loss_sample(rng.standard_normal((3, 2, 2)), mask, True)
        terms = pl.batch_loss_terms([sample], pl.LossWeights())
        assert float(terms["n_cos"].value) == 0.0
        assert float(terms["an_cos"].value) != 0.0
        assert float(terms["a_cos"].value) != 0.0
        assert float(terms["tri"].value) >= 0.0
        assert float(terms["con"].value) > 0.0

    def test_far_term_hinges_at_margin(self):
        mask = np.array([[False, True]])
        # reconstruction equals input on the defective patch: cos = 1
        recon = np.ones((2, 1, 2))
        sample = _loss_sample(recon, mask, True)
        terms = pl.batch_loss_terms([sample], pl.LossWeights())
        assert float(terms["far"].value) == pytest.approx(0.8, abs=1e-9)
        # orthogonal reconstruction on the defect: cos = 0, inside the margin
        recon2 = np.ones((2, 1, 2))
        recon2[:, 0, 1] = np.array([1.0, -1.0])
        sample2 = _loss_sample(recon2, mask, True)
        terms2 = pl.batch_loss_terms([sample2], pl.LossWeights())
        assert float(terms2["far"].value) == pytest.approx(0.0, abs=1e-9)

    def test_triplet_with_anchor_equal_positive(self):
        mask = np.array([[False, True]])
        # single normal patch pairs with itself: d(a, p) = 0
        recon_far = np.ones((2, 1, 2))
        recon_far[:, 0, 1] = np.array([1.0, -1.0])  # cos(a, n) = 0 -> d = 1
        terms = pl.batch_loss_terms([_loss_sample(recon_far, mask, True)], pl.LossWeights())
        assert float(terms["tri"].value) == pytest.approx(0.0, abs=1e-9)  # 1 > margin
        recon_near = np.ones((2, 1, 2))  # d(a, n) = 0 -> hinge at full margin
        terms2 = pl.batch_loss_terms([_loss_sample(recon_near, mask, True)], pl.LossWeights())
        assert float(terms2["tri"].value) == pytest.approx(0.5, abs=1e-9)

    def test_fully_masked_sample_leaves_normal_terms_empty(self):
        rng = np.random.default_rng(93)
        mask = np.ones((2, 2), dtype=bool)
        sample = _loss_sample(rng.standard_normal((3, 2, 2)), mask, True)
        terms = pl.batch_loss_terms([sample], pl.LossWeights())
        assert float(terms["an_cos"].value) == 0.0
        assert float(terms["tri"].value) == 0.0
        assert float(terms["con"].value) == 0.0
        assert float(terms["a_cos"].value) != 0.0

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            pl.LossWeights(lambda_con=-0.1)
        with pytest.raises(ValueError):
            pl.LossWeights(con_temperature=0.0)

    def test_pure_regularizer_gradient_is_linear(self):
        model = small_model(seed=11)
        weights = pl.LossWeights(lambda_n=0, lambda_a=0, lambda_con=0,
                                 lambda_an=0, lambda_far=0, lambda_tri=0,
                                 lambda_reg=0.25)
        feat = np.random.default_rng(94).standard_normal((4, 4, 4))
        state = model.forward(feat)
        terms = pl.batch_loss_terms(
            [pl.LossSample(state.recon, feat, None, False)], weights
        )
        loss = pl.total_loss(terms, weights, pl.regularizer(model.params))
        grads = ag.gradients(loss, list(model.params))
        for p, g in zip(model.params, grads):
            np.testing.assert_allclose(g, 2.0 * 0.25 * p.value, atol=1e-12)


class TestEndToEndGradients:
    def test_full_loss_gradients_match_fd(self):
        model = small_model(seed=13)
        weights = pl.LossWeights()
        rng = np.random.default_rng(95)
        feat_a = rng.standard_normal((4, 4, 4))
        feat_b = rng.standard_normal((4, 4, 4))
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 2] = True

        def build_loss():
            sa = model.forward(feat_a)
            sb = model.forward(feat_b)
            samples = [
                pl.LossSample(sa.recon, feat_a, None, False),
                pl.LossSample(sb.recon, feat_b, mask, True),
            ]
            terms = pl.batch_loss_terms(samples, weights)
            return pl.total_loss(terms, weights, pl.regularizer(model.params))

        loss = build_loss()
        engine = ag.gradients(loss, list(model.params))
        numeric = fd_param_grads(lambda: build_loss().value, list(model.params), h=1e-5)
        assert_grads_close(engine, numeric, rtol=1e-4, atol=1e-7,
                           names=model.params.names)
