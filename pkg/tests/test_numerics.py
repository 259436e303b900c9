import numpy as np
import pytest

from freqad import numerics as nm


class TestFFT:
    def test_constant_map_concentrates_in_dc(self):
        x = np.full((1, 4, 4), 3.0)
        spec = nm.fft2(x)
        assert spec[0, 0, 0] == pytest.approx(3.0 * 16)
        off_dc = spec.copy()
        off_dc[0, 0, 0] = 0.0
        assert np.max(np.abs(off_dc)) < 1e-12

    def test_impulse_gives_flat_spectrum(self):
        x = np.zeros((1, 8, 8))
        x[0, 0, 0] = 1.0
        spec = nm.fft2(x)
        np.testing.assert_allclose(spec, np.ones_like(spec), atol=1e-12)

    def test_dc_only_spectrum_inverts_to_constant(self):
        spec = np.zeros((1, 4, 4), dtype=np.complex128)
        spec[0, 0, 0] = 16.0
        out = nm.ifft2(spec)
        np.testing.assert_allclose(out, np.ones((1, 4, 4)), atol=1e-12)

    def test_zero_spectrum_inverts_to_zero(self):
        out = nm.ifft2(np.zeros((2, 8, 8), dtype=np.complex128))
        assert np.all(out == 0.0)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(7)
        for shape in [(1, 8, 8), (3, 16, 4), (16, 32, 32)]:
            x = rng.standard_normal(shape)
            back = nm.ifft2(nm.fft2(x))
            assert np.max(np.abs(back - x)) < 1e-9

    def test_parseval(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.standard_normal((2, 16, 16))
            spec = nm.fft2(x)
            lhs = np.sum(x * x)
            rhs = np.sum(np.abs(spec) ** 2) / (16 * 16)
            assert abs(lhs - rhs) / abs(lhs) < 1e-12

    def test_matches_library_transform(self):
        # independent oracle: numpy's own FFT
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 8, 16)) + 1j * rng.standard_normal((4, 8, 16))
        np.testing.assert_allclose(nm.fft2(x), np.fft.fft2(x), atol=1e-9)
        np.testing.assert_allclose(nm.ifft2_complex(x), np.fft.ifft2(x), atol=1e-9)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 8, 8))
        y = rng.standard_normal((1, 8, 8))
        lhs = nm.fft2(2.5 * x - 0.5 * y)
        rhs = 2.5 * nm.fft2(x) - 0.5 * nm.fft2(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_rejects_non_power_of_two(self):
        with pytest.raises(nm.NumericsError):
            nm.fft2(np.zeros((1, 6, 8)))
        with pytest.raises(nm.NumericsError):
            nm.fft2(np.zeros((1, 8, 12)))

    def test_rejects_empty_dimensions(self):
        with pytest.raises(nm.NumericsError):
            nm.fft2(np.zeros((1, 0, 8)))

    def test_size_one_axes_are_fine(self):
        x = np.array([[[2.0, -1.0, 0.5, 3.0]]])
        np.testing.assert_allclose(nm.ifft2(nm.fft2(x)), x, atol=1e-12)

    def test_imag_residue_reported(self):
        # a spectrum without conjugate symmetry cannot come from a real map
        spec = np.zeros((1, 4, 4), dtype=np.complex128)
        spec[0, 1, 0] = 1.0
        with pytest.raises(nm.NumericsError, match="residue"):
            nm.ifft2(spec)

    def test_amplitude_phase_split(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 8, 8))
        spec = nm.fft2(x)
        amp = nm.amplitude(spec)
        ph = nm.phase(spec)
        np.testing.assert_allclose(amp * np.exp(1j * ph), spec, atol=1e-9)
        assert np.all(amp >= 0.0)
        assert np.all(ph <= np.pi) and np.all(ph > -np.pi - 1e-12)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 7)) * 50
        p = nm.stable_softmax(x, axis=-1)
        np.testing.assert_allclose(p.sum(axis=-1), np.ones(5), atol=1e-12)
        assert np.all(p >= 0.0)

    def test_shift_invariance(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(
            nm.stable_softmax(x), nm.stable_softmax(x + 1000.0), atol=1e-12
        )

    def test_extreme_logits_do_not_overflow(self):
        p = nm.stable_softmax(np.array([0.0, 800.0]))
        assert np.isfinite(p).all()
        assert p[1] == pytest.approx(1.0)

    def test_empty_axis_rejected(self):
        with pytest.raises(nm.NumericsError):
            nm.stable_softmax(np.zeros((3, 0)))


class TestActivations:
    def test_fixed_points(self):
        assert nm.sigmoid(np.float64(0.0)) == pytest.approx(0.5)
        assert nm.softplus(np.float64(0.0)) == pytest.approx(np.log(2.0))
        assert nm.silu(np.float64(0.0)) == pytest.approx(0.0)

    def test_saturation_is_finite(self):
        x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
        for fn in (nm.sigmoid, nm.softplus, nm.silu):
            assert np.isfinite(fn(x)).all()
        assert nm.sigmoid(np.array([1e4]))[0] == pytest.approx(1.0)
        assert nm.softplus(np.array([-1e4]))[0] == pytest.approx(0.0)

    def test_softplus_dominates_relu(self):
        x = np.linspace(-5, 5, 101)
        assert np.all(nm.softplus(x) > np.maximum(x, 0.0) - 1e-12)


class TestCosine:
    def test_reference_values(self):
        assert nm.cosine_similarity([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
        assert nm.cosine_similarity([1.0, 0.0], [0.0, 5.0]) == pytest.approx(0.0)
        assert nm.cosine_similarity([1.0, 1.0], [-1.0, -1.0]) == pytest.approx(-1.0)

    def test_zero_vector_rules(self):
        z = np.zeros(4)
        assert nm.cosine_similarity(z, z) == 1.0
        assert nm.cosine_similarity(z, np.ones(4)) == 0.0
        assert nm.cosine_similarity(np.ones(4), z) == 0.0

    def test_scale_invariance_and_clipping(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            a = rng.standard_normal(6)
            b = rng.standard_normal(6)
            c = nm.cosine_similarity(a, b)
            assert -1.0 <= c <= 1.0
            assert nm.cosine_similarity(3.0 * a, 0.25 * b) == pytest.approx(c)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(nm.NumericsError):
            nm.cosine_similarity(np.ones(3), np.ones(4))
