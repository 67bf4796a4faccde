import math

import numpy as np
import pytest

from csilab.channel import ChannelParams, generate_batch, normalize
from csilab.errors import CsiLabError, ShapeError
from csilab.metrics import (
    DB_FLOOR,
    MetricsReport,
    cosine_similarity_rho,
    evaluate,
    evaluate_nmse_db,
    improvement_db,
    improvement_rho,
    nmse,
    nmse_db,
    nmse_terms,
    rho_terms,
    to_db,
)
from csilab.models import build_model


def complex_batch(rng, shape=(3, 2, 4, 4)):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestNmse:
    def test_perfect_reconstruction_hits_the_floor(self, rng):
        h = complex_batch(rng)
        assert nmse(h, h) == 0.0
        assert nmse_db(h, h) == DB_FLOOR

    def test_zero_reconstruction_is_zero_db(self, rng):
        h = complex_batch(rng)
        assert nmse_db(h, np.zeros_like(h)) == pytest.approx(0.0, abs=1e-12)

    def test_half_scale(self):
        h = np.full((1, 1, 2, 2), 2.0 + 0j)
        assert nmse(h, h / 2) == pytest.approx(0.25)
        assert nmse_db(h, h / 2) == pytest.approx(-6.0206, abs=1e-4)

    def test_scale_invariant(self, rng):
        h, h_hat = complex_batch(rng), complex_batch(rng)
        assert nmse(7.5 * h, 7.5 * h_hat) == pytest.approx(nmse(h, h_hat), rel=1e-12)

    def test_matches_loops(self, rng):
        h, h_hat = complex_batch(rng, (2, 3, 4, 2)), complex_batch(rng, (2, 3, 4, 2))
        per_sample = []
        for m in range(2):
            steps = [
                np.linalg.norm(h[m, t] - h_hat[m, t]) ** 2 / np.linalg.norm(h[m, t]) ** 2 for t in range(3)
            ]
            per_sample.append(sum(steps) / 3)
        assert abs(nmse(h, h_hat) - sum(per_sample) / 2) <= 1e-12

    def test_zero_norm_samples_are_skipped(self, rng):
        h = complex_batch(rng)
        h[1, 0] = 0
        value, skipped = nmse_terms(h, np.zeros_like(h))
        assert skipped == 1
        assert value == pytest.approx(1.0)

    def test_all_zero_fails(self):
        with pytest.raises(CsiLabError):
            nmse(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            nmse(complex_batch(rng), complex_batch(rng, (3, 2, 4, 2)))

    def test_db_floor(self):
        assert to_db(0.0) == DB_FLOOR
        assert to_db(1e-40) == DB_FLOOR
        assert to_db(0.1) == pytest.approx(-10.0)


class TestRho:
    def test_perfect_and_scaled(self, rng):
        h = complex_batch(rng, (2, 4, 16))
        assert cosine_similarity_rho(h, h) == pytest.approx(1.0)
        assert cosine_similarity_rho(h, (0.3 - 2j) * h) == pytest.approx(1.0)

    def test_per_column_scaling(self, rng):
        h = complex_batch(rng, (4, 8))
        weights = rng.uniform(0.5, 2.0, 8) * np.exp(1j * rng.uniform(0, 6, 8))
        assert cosine_similarity_rho(h, h * weights) == pytest.approx(1.0)

    def test_orthogonal(self):
        h = np.array([[1.0 + 0j], [0.0]])
        assert cosine_similarity_rho(h, np.array([[0.0 + 0j], [1j]])) == pytest.approx(0.0)

    def test_bounded(self, rng):
        value = cosine_similarity_rho(complex_batch(rng, (3, 4, 16)), complex_batch(rng, (3, 4, 16)))
        assert 0.0 <= value <= 1.0

    def test_zero_columns_are_excluded(self, rng):
        h = complex_batch(rng, (4, 6))
        h_hat = h.copy()
        h_hat[:, 2] = 0
        value, excluded = rho_terms(h, h_hat)
        assert excluded == 1
        assert value == pytest.approx(1.0)

    def test_all_zero_fails(self):
        with pytest.raises(CsiLabError):
            cosine_similarity_rho(np.zeros((2, 3)), np.zeros((2, 3)))


class TestEvaluate:
    @pytest.fixture
    def test_split(self, tiny_channel):
        return normalize(generate_batch(tiny_channel, 5))

    def test_bypass_is_ideal(self, tiny_channel, test_split):
        values, record = test_split
        report = evaluate(None, None, values, record, tiny_channel, bypass=True)
        assert report.variant == "bypass" and report.gamma == "1/1"
        assert report.nmse_db == DB_FLOOR
        assert report.rho == pytest.approx(1.0)
        assert report.samples == 5

    def test_network_report(self, tiny_channel, tiny_model_config, test_split):
        values, record = test_split
        model, params = build_model(tiny_model_config())
        report = evaluate(model, params, values, record, tiny_channel, epochs=3, batch_size=2)
        assert isinstance(report, MetricsReport)
        assert report.variant == "convlstm_a" and report.gamma == "1/4" and report.epochs == 3
        assert 0.0 <= report.rho <= 1.0
        assert report.nmse_db == pytest.approx(evaluate_nmse_db(model, params, values, record, 4))

    def test_rho_does_not_depend_on_batching(self, tiny_channel, tiny_model_config, test_split):
        values, record = test_split
        model, params = build_model(tiny_model_config())
        one = evaluate(model, params, values, record, tiny_channel, batch_size=1)
        all_ = evaluate(model, params, values, record, tiny_channel, batch_size=5)
        assert one.rho == pytest.approx(all_.rho, rel=1e-12)

    def test_needs_a_model(self, tiny_channel, test_split):
        values, record = test_split
        with pytest.raises(CsiLabError):
            evaluate(None, None, values, record, tiny_channel)

    def test_empty_validation_split(self, tiny_model_config, test_split):
        model, params = build_model(tiny_model_config())
        empty = np.empty((0, 3, 4, 4, 2))
        assert math.isnan(evaluate_nmse_db(model, params, empty, test_split[1]))

    def test_report_ranges(self):
        with pytest.raises(ValueError):
            MetricsReport(variant="csinet", gamma="1/4", alpha=0.1, nmse_linear=0.1, nmse_db=-10.0, rho=1.5)


class TestImprovements:
    def test_self_comparison_is_zero(self):
        assert improvement_db(-12.0, -12.0) == 0.0
        assert improvement_rho(0.9, 0.9) == 0.0

    def test_direction(self):
        assert improvement_db(-15.0, -10.0) == pytest.approx(50.0)
        assert improvement_db(-5.0, -10.0) == pytest.approx(-50.0)
        assert improvement_rho(0.99, 0.9) == pytest.approx(10.0)


def test_lift_exactness_keeps_bypass_rho_at_one():
    channel = ChannelParams(n_t=4, n_sub=32, n_c=8, steps=2, paths=3, seed=4)
    values, record = normalize(generate_batch(channel, 3))
    assert evaluate(None, None, values, record, channel, bypass=True).rho == pytest.approx(1.0, abs=1e-12)
