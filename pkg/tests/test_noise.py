import math
import warnings

import numpy as np
import pytest
from scipy import stats

from fadenoise.bayer import BayerImage
from fadenoise.noise import (
    CalibrationError, NoiseParams, SensorNoiseModel, calibrate, default_sensor_model, fit_noise_params,
    gain_to_params, ksigma, ksigma_batch, ksigma_inv, load_calibration_dir, sample_noise, sample_training_params,
    synthesize_calibration, synthesize_stacks, write_calibration_dir,
)
from fadenoise.tensor import Tensor


class TestNoiseParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseParams(0.0, 1e-5)
        with pytest.raises(ValueError):
            NoiseParams(1e-3, -1.0)
        with pytest.raises(ValueError):
            NoiseParams(float("nan"), 0.0)


class TestSampleNoise:
    def test_vanishing_variance(self, rng):
        x = rng.random((64, 64))
        y = sample_noise(x, NoiseParams(1e-12, 0.0), seed=0)
        assert np.max(np.abs(y - x)) < 1e-4

    def test_monte_carlo_variance(self):
        y = sample_noise(np.full(10**6, 0.5), NoiseParams(1e-3, 1e-5), seed=1)
        assert np.var(y) == pytest.approx(5.1e-4, rel=0.02)

    def test_clipping(self):
        y = sample_noise(np.ones((100, 100)), NoiseParams(1e-3, 0.5), seed=2)
        assert y.max() <= 1.0 and y.min() >= 0.0

    def test_seeded(self, rng):
        x = rng.random((16, 16))
        p = NoiseParams(1e-3, 1e-5)
        np.testing.assert_array_equal(sample_noise(x, p, 5), sample_noise(x, p, 5))
        assert not np.array_equal(sample_noise(x, p, 5), sample_noise(x, p, 6))

    def test_bayer_image_carries_params(self, rng):
        p = NoiseParams(1e-3, 1e-5)
        out = sample_noise(BayerImage(rng.random((8, 8)), name="x"), p, 0)
        assert out.noise == p and out.name == "x"

    def test_independent_pixels(self):
        x = np.full((512, 512), 0.4)
        n = sample_noise(x, NoiseParams(1e-3, 1e-5), seed=3) - x
        for axis in (0, 1):
            a = np.moveaxis(n, axis, 0)
            r = np.corrcoef(a[:-1].ravel(), a[1:].ravel())[0, 1]
            assert abs(r) < 0.01


class TestFit:
    def test_recovers_a_from_four_stacks(self):
        stacks = synthesize_stacks(NoiseParams(1e-3, 1e-5), means=(0.2, 0.4, 0.6, 0.8), samples=10**5, seed=4)
        assert fit_noise_params(stacks).a == pytest.approx(1e-3, rel=0.05)

    def test_recovers_a_and_b(self):
        # b is an extrapolated intercept: four stacks of 1e5 samples leave it ~15% uncertain,
        # nine stacks spanning the mid range at 2e6 samples bring that to ~1%
        means = tuple(np.round(np.arange(0.1, 0.91, 0.1), 2))
        fit = fit_noise_params(synthesize_stacks(NoiseParams(1e-3, 1e-5), means=means, samples=2 * 10**6, seed=4))
        assert fit.a == pytest.approx(1e-3, rel=0.05)
        assert fit.b == pytest.approx(1e-5, rel=0.05)

    def test_flat_variance_rejected(self, rng):
        s = rng.normal(0, 0.01, 1000)
        with pytest.raises(CalibrationError):
            fit_noise_params([(0.3 + s, 0.3), (0.6 + s, 0.6)])

    def test_noiseless_rejected(self):
        with pytest.raises(CalibrationError):
            fit_noise_params([(np.full(100, m), m) for m in (0.2, 0.4, 0.6, 0.8)])

    def test_too_few_usable_stacks(self, rng):
        p = NoiseParams(1e-3, 1e-5)
        stacks = synthesize_stacks(p, means=(0.02, 0.5, 0.97), samples=1000, seed=0)
        with pytest.raises(CalibrationError):
            fit_noise_params(stacks)


class TestCalibrate:
    def test_regressions(self, tmp_path):
        per_gain = synthesize_calibration(gains=(1, 2, 4, 8), a_per_gain=2e-4, b_per_gain2=5e-6,
                                          samples=10**5, seed=0)
        write_calibration_dir(tmp_path, per_gain)
        model = calibrate(load_calibration_dir(tmp_path))
        p, flag = gain_to_params(model, 4.0)
        assert not flag
        assert p.a == pytest.approx(8e-4, rel=0.05)
        assert p.b == pytest.approx(8e-5, rel=0.15)
        assert model.a_min == pytest.approx(2e-4, rel=0.05)
        assert model.a_max == pytest.approx(1.6e-3, rel=0.05)

    def test_needs_three_gains(self):
        with pytest.raises(CalibrationError):
            calibrate(synthesize_calibration(gains=(1, 2), samples=2000))

    def test_json_round_trip(self, tmp_path):
        m = SensorNoiseModel((-9.0, -5.0), (1.5, -2.0), (1e-4, 0.0), (1e-6, 0.0, 1e-6), (1.0, 16.0))
        m.save(tmp_path / "s.json")
        assert SensorNoiseModel.load(tmp_path / "s.json") == m


class TestTrainingParams:
    def test_degenerate_range(self):
        m = SensorNoiseModel.from_a_range(1e-3, 1e-3, (1.5, -1.0))
        for s in range(5):
            assert sample_training_params(m, s).a == pytest.approx(1e-3, rel=1e-12)

    def test_log_a_uniform(self):
        m = default_sensor_model()
        rng = np.random.default_rng(0)
        la = np.array([math.log(sample_training_params(m, rng).a) for _ in range(10**5)])
        lo, hi = m.log_a_range
        counts, _ = np.histogram(la, bins=20, range=(lo, hi))
        assert counts.sum() == la.size
        assert stats.chisquare(counts).pvalue > 0.01

    def test_b_on_line(self):
        m = default_sensor_model()
        for s in range(20):
            p = sample_training_params(m, s)
            assert math.log(p.b) == pytest.approx(m.log_b(math.log(p.a)), rel=1e-12, abs=1e-12)


class TestGainToParams:
    def test_linear_a(self):
        m = SensorNoiseModel((-9.0, -5.0), (1.0, 0.0), gain_to_a=(3e-4, 0.0), gain_to_b=(0, 0, 1e-6),
                             gain_range=(1.0, 16.0))
        assert gain_to_params(m, 5.0)[0].a == pytest.approx(1.5e-3)

    def test_quadratic_b(self):
        m = SensorNoiseModel((-9.0, -5.0), (1.0, 0.0), gain_to_a=(1e-4, 0.0), gain_to_b=(2e-6, 3e-6, 1e-6),
                             gain_range=(1.0, 16.0))
        assert gain_to_params(m, 4.0)[0].b == pytest.approx(2e-6 * 16 + 3e-6 * 4 + 1e-6)

    def test_extrapolation_flag(self):
        m = SensorNoiseModel((-9.0, -5.0), (1.0, 0.0), gain_to_a=(1e-4, 0.0), gain_to_b=(0, 0, 1e-6),
                             gain_range=(1.0, 16.0))
        with pytest.warns(UserWarning):
            _, flag = gain_to_params(m, 32.0)
        assert flag
        with pytest.raises(ValueError):
            gain_to_params(m, 0.5)

    def test_monotone_a(self):
        m = SensorNoiseModel((-9.0, -5.0), (1.0, 0.0), gain_to_a=(1e-4, 2e-5), gain_to_b=(0, 0, 1e-6),
                             gain_range=(1.0, 64.0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = [gain_to_params(m, g)[0].a for g in np.linspace(1, 64, 50)]
        assert np.all(np.diff(a) >= 0)


class TestKsigma:
    def test_identity(self, rng):
        x = rng.random((4, 4))
        np.testing.assert_array_equal(ksigma(x, NoiseParams(1.0, 0.0)), x)

    def test_round_trip(self, rng):
        x = rng.random((32, 32))
        for p in [NoiseParams(1e-4, 1e-7), NoiseParams(1e-3, 1e-5), NoiseParams(1e-2, 1e-4)]:
            np.testing.assert_allclose(ksigma_inv(ksigma(x, p), p), x, atol=1e-6)

    @pytest.mark.parametrize("a,b", [(1e-4, 1e-7), (3e-4, 5e-7), (1e-3, 1e-5), (3e-3, 5e-5), (1e-2, 1e-4)])
    def test_variance_equals_mean(self, a, b):
        p = NoiseParams(a, b)
        x = 0.3
        rng = np.random.default_rng(0)
        y = x + rng.standard_normal(10**6) * math.sqrt(a * x + b)  # unclipped
        z = ksigma(y, p)
        assert np.var(z) == pytest.approx(np.mean(z), rel=0.02)

    def test_tensor_and_batch(self, rng):
        x = rng.random((2, 4, 3, 3)).astype(np.float32)
        ps = [NoiseParams(1e-3, 1e-5), NoiseParams(1e-2, 1e-4)]
        out = ksigma_batch(Tensor(x), ps).data
        for i, p in enumerate(ps):
            np.testing.assert_allclose(out[i], ksigma(x[i], p), rtol=1e-5)
        back = ksigma_batch(Tensor(out), ps, inverse=True).data
        np.testing.assert_allclose(back, x, atol=1e-5)
        np.testing.assert_allclose(ksigma(Tensor(x), ps[0]).data, ksigma(x, ps[0]), rtol=1e-6)
