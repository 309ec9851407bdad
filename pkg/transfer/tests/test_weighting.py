import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from transfer.exceptions import ConfigError, DimensionError, NonFiniteError
from transfer.services.weighting import (
    WeightConfig,
    calibrate,
    calibrated,
    compute_weights,
    log_weight,
    normalize_log_weights,
    normalize_weights,
    raw_weight,
    write_weight_dump,
)

losses_strategy = st.lists(st.floats(min_value=0.0, max_value=50.0), min_size=1, max_size=64)


class WeightFunctionTests(SimpleTestCase):
    def test_reference_value(self):
        self.assertEqual(raw_weight([1.0], WeightConfig(eta=-1.0, beta=1.0))[0], 0.5)

    def test_zero_loss(self):
        self.assertAlmostEqual(raw_weight([0.0], WeightConfig())[0], 1.0 / (1.0 + np.exp(-1.0)))

    def test_parameter_ranges(self):
        with self.assertRaises(ConfigError):
            WeightConfig(eta=0.0)
        with self.assertRaises(ConfigError):
            WeightConfig(eta=0.5)
        with self.assertRaises(ConfigError):
            WeightConfig(beta=0.0)
        with self.assertRaises(ValueError):
            raw_weight([-0.1], WeightConfig())

    def test_empty_batch(self):
        with self.assertRaises(DimensionError):
            normalize_weights([])

    def test_steep_eta_keeps_relative_weights(self):
        # raw weights underflow at this scale, their ratio does not
        w = compute_weights([0.8, 0.9], WeightConfig(eta=-1000.0, beta=1.0))
        np.testing.assert_array_equal(w.raw, [0.0, 0.0])
        self.assertTrue(np.all(np.isfinite(w.normalized)))
        self.assertAlmostEqual(float(w.normalized.mean()), 1.0, delta=1e-9)
        expected = 2.0 * np.exp([0.0, -100.0]) / (1.0 + np.exp(-100.0))
        np.testing.assert_allclose(w.normalized, expected, rtol=1e-9)

    def test_log_weight_matches_raw(self):
        losses = np.array([0.0, 0.3, 1.0, 4.0])
        cfg = WeightConfig(eta=-2.0, beta=0.5)
        np.testing.assert_allclose(np.exp(log_weight(losses, cfg)), raw_weight(losses, cfg), rtol=1e-12)
        self.assertTrue(np.isfinite(log_weight([1e6], cfg)[0]))

    def test_degenerate_batches(self):
        with self.assertRaises(NonFiniteError):
            normalize_weights([0.0, 0.0])
        with self.assertRaises(NonFiniteError):
            normalize_log_weights([np.nan, 0.0])
        with self.assertRaises(NonFiniteError):
            compute_weights([0.1, np.inf], WeightConfig())
        np.testing.assert_allclose(normalize_weights([0.0, 1.0]), [0.0, 2.0])

    def test_normalize_off_keeps_raw(self):
        w = compute_weights([0.1, 2.0, 5.0], WeightConfig(normalize=False))
        np.testing.assert_array_equal(w.raw, w.normalized)

    @settings(max_examples=100, deadline=None)
    @given(losses_strategy, st.floats(min_value=-5.0, max_value=-0.01), st.floats(min_value=0.01, max_value=5.0))
    def test_strictly_decreasing(self, values, eta, beta):
        losses = np.sort(np.unique(np.round(values, 6)))
        w = raw_weight(losses, WeightConfig(eta=eta, beta=beta))
        # expit saturates in double precision; monotone everywhere, strict where it still resolves
        self.assertTrue(np.all(np.diff(w) <= 0))
        resolvable = (w[:-1] > 1e-6) & (w[:-1] < 1 - 1e-6)
        self.assertTrue(np.all(np.diff(w)[resolvable & (np.diff(losses) > 1e-3)] < 0))

    @settings(max_examples=100, deadline=None)
    @given(losses_strategy)
    def test_normalized_mean_is_one(self, values):
        w = compute_weights(values, WeightConfig())
        self.assertAlmostEqual(float(w.normalized.mean()), 1.0, delta=1e-9)
        self.assertTrue(np.all(w.raw > 0) and np.all(w.raw < 1))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=1e3), min_size=1, max_size=64),
           st.floats(min_value=-1e4, max_value=-1.0))
    def test_normalized_finite_for_steep_eta(self, values, eta):
        w = compute_weights(values, WeightConfig(eta=eta, beta=1.0))
        self.assertTrue(np.all(np.isfinite(w.normalized)))
        self.assertAlmostEqual(float(w.normalized.mean()), 1.0, delta=1e-9)
        ordered = w.normalized[np.argsort(values, kind="stable")]
        self.assertTrue(np.all(np.diff(ordered) <= 1e-9))


class CalibrationTests(SimpleTestCase):
    def test_median_maps_to_one_half(self):
        losses = np.array([0.02, 0.05, 0.08, 0.4, 3.0])
        eta, beta = calibrate(losses)
        self.assertAlmostEqual(eta, -1.0 / 0.08)
        self.assertAlmostEqual(beta, 1.0)
        self.assertAlmostEqual(raw_weight([0.08], WeightConfig(eta, beta))[0], 0.5)

    def test_floor_falls_back_to_defaults(self):
        with self.assertLogs("transfer.services.weighting", "WARNING"):
            self.assertEqual(calibrate(np.zeros(10)), (-1.0, 1.0))

    def test_calibrated_respects_switch(self):
        cfg = WeightConfig(eta=-2.0, beta=0.5, auto_calibrate=False)
        self.assertIs(calibrated(cfg, [0.1, 0.2, 0.3]), cfg)
        self.assertAlmostEqual(calibrated(WeightConfig(), [0.1, 0.2, 0.3]).eta, -5.0)


class WeightDumpTests(SimpleTestCase):
    def test_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            losses = np.array([0.1, 0.5, 2.0])
            weights = compute_weights(losses, WeightConfig())
            path = write_weight_dump(Path(tmp) / "weights.csv", losses, weights)
            frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ["sample_id", "recon_loss", "raw_weight", "normalized_weight"])
        self.assertEqual(frame["sample_id"].tolist(), [0, 1, 2])
        np.testing.assert_allclose(frame["normalized_weight"], weights.normalized, rtol=1e-9)

    def test_length_mismatch(self):
        weights = compute_weights([0.1, 0.2], WeightConfig())
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(DimensionError):
            write_weight_dump(Path(tmp) / "w.csv", [0.1, 0.2, 0.3], weights)
