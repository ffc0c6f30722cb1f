"""Quality metrics against scalar-loop oracles, plus the energy rule."""

import math

import numpy as np
import pytest

from patchdenoiser.errors import DimensionError, UsageError
from patchdenoiser.metrics import (aggregate, build_report,
                                   energy_per_inference, format_metric, psnr,
                                   rmse, ssim)
from patchdenoiser.preprocess import Image2D

from oracles import psnr_loops, rmse_loops, ssim_loops


def _img(values):
    return Image2D(np.asarray(values, dtype=np.float64), "normalized01")


def _pair(rng, shape=(32, 32)):
    a = rng.uniform(0, 1, shape)
    b = np.clip(a + rng.normal(0, 0.05, shape), 0, 1)
    return _img(a), _img(b)


class TestPsnr:
    def test_known_mse(self, rng):
        a = rng.uniform(0.2, 0.8, (16, 16))
        b = a + 0.1  # constant offset, MSE exactly 0.01
        value = psnr(_img(a), Image2D(b, "raw"))
        assert abs(value - 20.0) < 1e-9

    def test_identical_is_infinite(self, rng):
        a, _ = _pair(rng)
        assert psnr(a, _img(a.values.copy())) == math.inf

    def test_matches_loop_oracle(self, rng):
        a, b = _pair(rng, (16, 16))
        assert abs(psnr(a, b) - psnr_loops(a.values, b.values)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(_img(np.zeros((4, 4))), _img(np.zeros((4, 5))))


class TestRmse:
    def test_identical_zero(self, rng):
        a, _ = _pair(rng)
        assert rmse(a, _img(a.values.copy())) == 0.0

    def test_constant_offset(self, rng):
        a = rng.uniform(0.2, 0.8, (8, 8))
        assert abs(rmse(_img(a), Image2D(a - 0.07, "raw")) - 0.07) < 1e-12

    def test_matches_loop_oracle(self, rng):
        a, b = _pair(rng, (12, 12))
        assert abs(rmse(a, b) - rmse_loops(a.values, b.values)) < 1e-12


class TestSsim:
    def test_self_similarity_is_one(self, rng):
        a, _ = _pair(rng)
        assert ssim(a, _img(a.values.copy())) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self, rng):
        a, b = _pair(rng)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_matches_window_oracle(self, rng):
        a, b = _pair(rng, (24, 24))
        assert abs(ssim(a, b) - ssim_loops(a.values, b.values)) < 1e-6

    def test_bounded_above_by_one(self, rng):
        for _ in range(5):
            a, b = _pair(rng)
            assert ssim(a, b) <= 1.0

    def test_small_image_rejected(self):
        with pytest.raises(UsageError):
            ssim(_img(np.zeros((8, 8))), _img(np.zeros((8, 8))))


class TestRelations:
    def test_psnr_rmse_identity(self, rng):
        for _ in range(10):
            a, b = _pair(rng, (16, 16))
            r = rmse(a, b)
            assert abs(psnr(a, b) + 20.0 * math.log10(r)) < 1e-9


class TestEnergy:
    def test_reference_rows(self):
        assert energy_per_inference(17.0) == 0.85
        assert energy_per_inference(458.0) == 22.9
        assert energy_per_inference(0.0) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(UsageError):
            energy_per_inference(-1.0)

    def test_report_couples_energy_to_gflops(self):
        report = build_report(30.0, 0.9, 0.01, params_m=0.06, gflops=17.0)
        assert report.energy_per_inference == report.gflops / 20.0


class TestFormatting:
    def test_infinity_renders_as_string(self):
        assert format_metric(math.inf) == "inf"
        assert format_metric(20.0) == "20.000000"

    def test_aggregate_excludes_infinities(self):
        mean, std = aggregate([10.0, math.inf, 20.0])
        assert mean == 15.0
        assert std == pytest.approx(np.std([10.0, 20.0], ddof=1))

    def test_aggregate_single_value_zero_std(self):
        assert aggregate([5.0]) == (5.0, 0.0)
