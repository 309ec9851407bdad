import json
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, tag
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from transfer.exceptions import ConfigError, EvaluationError
from transfer.services import evaluation
from transfer.services.datasets import EvalSet, SynthConfig, TaskRecipe, synth_domain_pair
from transfer.services.networks import ArchConfig, build_bundle
from transfer.services.trainer import TrainConfig

QUICK = TrainConfig(pretrain_epochs=2, adversarial_epochs=2, batch_size=16, snapshot_every=2)
SMALL = SynthConfig(n_source=60, n_target=60)


def mann_whitney(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


scored_samples = st.lists(
    st.tuples(st.integers(min_value=0, max_value=20), st.integers(min_value=0, max_value=1)),
    min_size=2, max_size=200,
).filter(lambda rows: len({label for _, label in rows}) == 2)


class AucTests(SimpleTestCase):
    @settings(max_examples=100, deadline=None)
    @given(scored_samples)
    def test_matches_pairwise_probability(self, rows):
        scores = np.array([s for s, _ in rows], dtype=float)
        labels = np.array([l for _, l in rows])
        auc, _ = evaluation.roc_auc(scores, labels)
        self.assertAlmostEqual(auc, mann_whitney(scores, labels), delta=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(scored_samples)
    def test_invariant_under_monotone_maps(self, rows):
        scores = np.array([s for s, _ in rows], dtype=float)
        labels = np.array([l for _, l in rows])
        auc, _ = evaluation.roc_auc(scores, labels)
        self.assertEqual(evaluation.roc_auc(np.exp(scores / 4.0) + 3.0, labels)[0], auc)

    def test_curve_end_points(self):
        auc, roc = evaluation.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        self.assertAlmostEqual(auc, 0.75)
        np.testing.assert_array_equal(roc[0], [0.0, 0.0])
        np.testing.assert_array_equal(roc[-1], [1.0, 1.0])

    def test_single_class(self):
        with self.assertRaises(EvaluationError):
            evaluation.roc_auc([0.1, 0.2], [0, 0])


class ScoreTableTests(SimpleTestCase):
    def test_separation_gap(self):
        self.assertAlmostEqual(evaluation.separation_gap([1.0, 3.0], [5.0]), 3.0)
        with self.assertRaises(EvaluationError):
            evaluation.separation_gap([1.0], [])

    def test_histograms_share_edges(self):
        pops = {"src": np.array([0.0, 1.0, 2.0]), "tgt_normal": np.array([0.5]), "tgt_anomaly": np.array([4.0, 4.0])}
        table = evaluation.histogram_table(pops, bins=4)
        self.assertEqual(list(table.columns), ["bin_lo", "bin_hi", "src", "tgt_normal", "tgt_anomaly"])
        self.assertEqual(table["bin_lo"].iloc[0], 0.0)
        self.assertEqual(table["bin_hi"].iloc[-1], 4.0)
        self.assertEqual([table[k].sum() for k in pops], [3, 1, 2])
        with self.assertRaises(ConfigError):
            evaluation.histogram_table(pops, bins=0)


class BundleEvaluationTests(SimpleTestCase):
    def setUp(self):
        self.data = synth_domain_pair(SMALL, seed=0)
        self.bundle = build_bundle(ArchConfig("mlp", self.data.feature_shape), seed=0)

    def test_labelled(self):
        report = evaluation.evaluate_bundle(self.bundle, self.data.eval_set(), bins=5)
        self.assertTrue(0.0 <= report.auc <= 1.0)
        self.assertEqual(report.scores.size, 60)
        self.assertIn("final_gap", report.extra)
        self.assertEqual(len(report.histograms), 5)

    def test_unlabelled_omits_auc(self):
        unlabelled = EvalSet(self.data.source, self.data.target, None)
        with self.assertLogs("transfer.services.evaluation", "WARNING"):
            report = evaluation.evaluate_bundle(self.bundle, unlabelled)
        self.assertIsNone(report.auc)
        self.assertIsNone(report.metrics()["auc"])

    def test_loss_histogram_populations(self):
        table = evaluation.loss_histogram(self.bundle, self.data.eval_set(), bins=7)
        self.assertEqual(len(table), 7)
        self.assertEqual([int(table[k].sum()) for k in ("src", "tgt_normal", "tgt_anomaly")], [60, 45, 15])

    def test_domain_separability_metrics(self):
        metrics = evaluation.domain_separability(self.bundle, self.data.eval_set(), seed=0)
        self.assertEqual(set(metrics), {"heldout_domain_accuracy", "separability_accuracy", "proxy_a_distance"})
        self.assertTrue(0.5 <= metrics["separability_accuracy"] <= 1.0)
        self.assertAlmostEqual(metrics["proxy_a_distance"], 2.0 * (2.0 * metrics["separability_accuracy"] - 1.0))

    def test_artifacts_are_reproducible(self):
        report = evaluation.evaluate_bundle(self.bundle, self.data.eval_set())
        with tempfile.TemporaryDirectory() as tmp:
            first = evaluation.write_eval_artifacts(report, Path(tmp) / "a", {"seed": 0})
            second = evaluation.write_eval_artifacts(report, Path(tmp) / "b", {"seed": 0})
            self.assertEqual(set(first), {"metrics", "roc", "scores", "histogram"})
            for name in first:
                self.assertEqual(first[name].read_bytes(), second[name].read_bytes())
            metrics = json.loads(first["metrics"].read_text())
            roc = pd.read_csv(first["roc"])
        self.assertEqual(metrics["config"], {"seed": 0})
        self.assertAlmostEqual(metrics["auc"], report.auc)
        self.assertEqual(list(roc.columns), ["fpr", "tpr"])

    def test_reconstruction_export(self):
        bundle = build_bundle(ArchConfig("conv", (1, 28, 28)), seed=0)
        samples = np.random.default_rng(0).random((3, 1, 28, 28))
        with tempfile.TemporaryDirectory() as tmp:
            path = evaluation.export_reconstructions(bundle, samples, Path(tmp) / "recon.png", scale=2)
            with Image.open(path) as image:
                self.assertEqual(image.size, (3 * 28 * 2, 3 * 28 * 2))


class ExperimentTests(SimpleTestCase):
    def test_monitored_run(self):
        data = synth_domain_pair(SMALL, seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            result = evaluation.run_experiment(QUICK, data, out_dir=tmp, bins=6)
            hist = sorted(p.name for p in Path(tmp).glob("hist_epoch*.csv"))
        frame = result.losses.to_frame()
        for column in ("heldout_source_recon", "heldout_target_normal_recon", "heldout_target_anomaly_recon",
                       "separation_gap", "heldout_domain_accuracy", "separability_accuracy", "proxy_a_distance"):
            self.assertIn(column, frame.columns)
        self.assertEqual(hist, ["hist_epoch001.csv", "hist_epoch003.csv"])
        self.assertEqual(result.evaluation.gap_epochs, [0, 1, 2, 3])
        self.assertAlmostEqual(result.evaluation.separation_gap[-1], result.evaluation.extra["final_gap"])

    def test_baselines(self):
        data = synth_domain_pair(SMALL, seed=0)
        finetune = evaluation.baseline_finetune(QUICK, data, finetune_epochs=0)
        source_only = evaluation.baseline_source_only(QUICK, data)
        self.assertEqual(finetune.auc, source_only.auc)
        oracle = evaluation.baseline_target_oracle(QUICK, data)
        self.assertTrue(0.0 <= oracle.auc <= 1.0)
        with self.assertRaises(ConfigError):
            evaluation.evaluate_method("isolation_forest", QUICK, data)

    def test_sweep_table(self):
        recipe = TaskRecipe(synth=SMALL)
        table = evaluation.sweep(QUICK, recipe, "w_adloss", [0.5, 1.0], repeats=2)
        self.assertEqual(list(table["value"]), [0.5, 1.0])
        for column in ("axis", "method", "auc_median", "auc_spread", "auc_1", "auc_2"):
            self.assertIn(column, table.columns)
        self.assertNotIn("auc_3", table.columns)
        with self.assertRaises(ConfigError):
            evaluation.sweep(QUICK, recipe, "dropout", [0.1])

    def test_one_point_sweep_equals_single_run(self):
        recipe = TaskRecipe(synth=SMALL)
        table = evaluation.sweep(QUICK, recipe, "anomaly_rate", [0.25], repeats=1)
        seed = evaluation.grid_seed(QUICK.seed, 0, 0)
        single = evaluation.run_experiment(replace(QUICK, seed=seed), recipe.build(seed, 0.25))
        self.assertEqual(table["auc_1"].iloc[0], single.evaluation.auc)

    def test_sweep_points_draw_fresh_seeds(self):
        seeds = [evaluation.grid_seed(0, point, r) for point in range(5) for r in range(5)]
        self.assertEqual(len(set(seeds)), 25)
        self.assertEqual(seeds, [evaluation.grid_seed(0, point, r) for point in range(5) for r in range(5)])
        self.assertNotEqual(evaluation.grid_seed(0, 0, 0), evaluation.grid_seed(1, 0, 0))
        # methods in a comparison share their seeds
        self.assertEqual(evaluation.grid_seed(3, None, 2), 5)

    def test_compare_rows(self):
        table = evaluation.compare(QUICK, TaskRecipe(synth=SMALL), ["finetune", "source_only"], repeats=1)
        self.assertEqual(list(table["method"]), ["finetune", "source_only"])
        with self.assertRaises(ConfigError):
            evaluation.compare(QUICK, TaskRecipe(synth=SMALL), ["unmasking"], repeats=1)

    def test_stage_dynamics_row(self):
        row = evaluation.stage_dynamics(QUICK, synth_domain_pair(SMALL, seed=0))
        self.assertAlmostEqual(row["normal_drop"],
                               1.0 - row["normal_recon_final"] / row["normal_recon_pretrain"])
        self.assertGreaterEqual(row["anomaly_change"], 0.0)
        self.assertTrue(0.5 <= row["separability_accuracy_pretrain"] <= 1.0)
        with self.assertRaises(ConfigError):
            evaluation.stage_dynamics(replace(QUICK, adversarial_epochs=0), synth_domain_pair(SMALL, seed=0))


SEEDS = range(5)


@tag("slow")
class TransferDynamicsTests(SimpleTestCase):
    """Multi-seed behaviour of the full method on the default synthetic task."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cfg = TrainConfig(adversarial_epochs=50)
        rows = [evaluation.stage_dynamics(replace(cfg, seed=s), synth_domain_pair(SynthConfig(), s)) for s in SEEDS]
        cls.median = pd.DataFrame(rows).median(numeric_only=True)

    def test_domains_separable_after_pretraining(self):
        self.assertGreater(self.median["separability_accuracy_pretrain"], 0.9)

    def test_classifier_confused_after_alignment(self):
        self.assertGreaterEqual(self.median["classifier_accuracy_final"], 0.4)
        self.assertLessEqual(self.median["classifier_accuracy_final"], 0.65)

    def test_normals_improve_while_anomalies_hold(self):
        self.assertGreater(self.median["normal_drop"], 0.4)
        self.assertLess(self.median["anomaly_change"], 0.2)

    def test_separation_gap_grows_by_half(self):
        self.assertGreaterEqual(self.median["gap_final"], 1.5 * self.median["gap_pretrain"])

    def test_gap_wider_at_epoch_79_than_19(self):
        cfg = TrainConfig()
        ratios = []
        for s in SEEDS:
            result = evaluation.run_experiment(replace(cfg, seed=s), synth_domain_pair(SynthConfig(), s),
                                               separability=False)
            gaps = dict(zip(result.evaluation.gap_epochs, result.evaluation.separation_gap))
            ratios.append(gaps[79] / gaps[19])
        self.assertGreater(float(np.median(ratios)), 1.0)


@tag("slow")
class RobustnessTrendTests(SimpleTestCase):
    rates = (0.05, 0.25, 0.45)

    def test_weighting_degrades_less_than_finetune(self):
        recipe = TaskRecipe(synth=SynthConfig())
        tables = {m: evaluation.sweep(TrainConfig(), recipe, "anomaly_rate", self.rates, repeats=5, method=m)
                  for m in ("proposed", "finetune")}
        median = {m: dict(zip(t["value"], t["auc_median"])) for m, t in tables.items()}
        drop = {m: median[m][0.05] - median[m][0.45] for m in median}
        self.assertLess(drop["proposed"], drop["finetune"])
        self.assertGreaterEqual(median["proposed"][0.45] - median["finetune"][0.45], 0.05)

    def test_insensitive_to_adversarial_weight(self):
        table = evaluation.sweep(TrainConfig(), TaskRecipe(synth=SynthConfig()), "w_adloss", [0.25, 0.5, 1.0, 2.0],
                                 repeats=5)
        self.assertLess(float(np.ptp(table["auc_median"].to_numpy())), 0.10)
