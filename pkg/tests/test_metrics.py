import csv
import json
import math

import numpy as np
import pytest

from fadenoise import fanet
from fadenoise.data import synthetic_pairs
from fadenoise.evaluation import evaluate, identity_row, load_model
from fadenoise.metrics import IDENTICAL_PSNR, REPORT_COLUMNS, ImageMetrics, MetricError, MetricReport, psnr, ssim
from fadenoise.noise import default_sensor_model


class TestPsnr:
    def test_identical_sentinel(self, rng):
        x = rng.random((8, 8))
        assert psnr(x, x) == IDENTICAL_PSNR == math.inf

    def test_uniform_difference(self):
        assert psnr(np.full((4, 4), 0.6), np.full((4, 4), 0.5)) == pytest.approx(20.0, abs=1e-12)

    def test_halving_adds_6db(self, rng):
        x = rng.random((16, 16))
        d = rng.normal(size=(16, 16)) * 0.05
        assert psnr(x + d / 2, x) - psnr(x + d, x) == pytest.approx(20 * math.log10(2), abs=1e-10)

    def test_monotone_in_noise(self, rng):
        x = rng.random((32, 32))
        n = rng.normal(size=(32, 32))
        vals = [psnr(x + s * n, x) for s in (0.01, 0.02, 0.05, 0.1)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identical(self, rng):
        x = rng.random((16, 16))
        assert ssim(x, x) == 1.0

    def test_constant_pair_closed_form(self):
        c1 = (0.01 * 1.0) ** 2
        expected = (2 * 0.5 * 0.6 + c1) / (0.5 ** 2 + 0.6 ** 2 + c1)
        assert ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.6)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.98361, abs=1e-5)

    def test_symmetric_and_bounded(self, rng):
        a, b = rng.random((20, 20)), rng.random((20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1 <= ssim(a, b) < 1

    def test_channel_first_rgb(self, rng):
        x = rng.random((3, 16, 16))
        assert ssim(x, x) == 1.0

    def test_too_small(self):
        with pytest.raises(MetricError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestReport:
    def rows(self):
        return [ImageMetrics("a", 30.0, 0.9, 28.0, 0.8), ImageMetrics("b", 40.0, 0.7, 32.0, 0.6)]

    def test_aggregate_means(self):
        r = MetricReport.aggregate(self.rows(), 5.2)
        assert (r.raw_psnr, r.raw_ssim, r.rgb_psnr, r.rgb_ssim) == pytest.approx((35.0, 0.8, 30.0, 0.7))

    def test_empty(self):
        with pytest.raises(MetricError):
            MetricReport.aggregate([], 1.0)

    def test_files(self, tmp_path):
        r = MetricReport.aggregate(self.rows() + [ImageMetrics("c", math.inf, 1.0, math.inf, 1.0)], 5.2)
        r.write(tmp_path / "r.json", tmp_path / "r.csv")
        body = json.loads((tmp_path / "r.json").read_text())
        assert body["raw_psnr"] == "inf" and len(body["per_image"]) == 3
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert tuple(rows[0]) == ("name",) + REPORT_COLUMNS
        assert [r[0] for r in rows[1:]] == ["a", "b", "c", "mean"]


@pytest.fixture(scope="module")
def pairs():
    return synthetic_pairs(3, 32, default_sensor_model(), seed=0)


@pytest.fixture(scope="module")
def identity_ckpt(tmp_path_factory):
    cfg = fanet.ModelConfig()
    path = tmp_path_factory.mktemp("ident") / "ck"
    fanet.save_checkpoint(path, cfg, fanet.init_weights(cfg, seed=0))
    return str(path)


class TestEvaluate:
    def test_identity_model_reproduces_input_row(self, pairs, identity_ckpt):
        rep = evaluate(identity_ckpt, pairs)
        ref = identity_row(pairs)
        for k in ("raw_psnr", "raw_ssim", "rgb_psnr", "rgb_ssim"):
            assert getattr(rep, k) == pytest.approx(ref[k], abs=1e-4), k
            assert getattr(rep, k) == pytest.approx(getattr(rep, "input_" + k), abs=1e-4), k
        assert rep.gmacs_per_mp == pytest.approx(fanet.count_macs(fanet.ModelConfig(), 32, 32))

    def test_ground_truth_against_itself(self, pairs, identity_ckpt):
        same = [(c, c) for _, c in pairs[:1]]
        row = identity_row(same)
        assert row["raw_psnr"] == math.inf and row["raw_ssim"] == 1.0

    def test_order_independent_and_rows_sum(self, pairs, identity_ckpt):
        a = evaluate(identity_ckpt, pairs)
        b = evaluate(identity_ckpt, list(reversed(pairs)))
        assert a.to_json() == b.to_json()
        assert np.mean([r.raw_psnr for r in a.per_image]) == pytest.approx(a.raw_psnr)

    def test_empty_set(self, identity_ckpt):
        with pytest.raises(MetricError):
            evaluate(identity_ckpt, [])

    def test_load_model_kinds(self, identity_ckpt):
        assert type(load_model(identity_ckpt)).__name__ == "Denoiser"
