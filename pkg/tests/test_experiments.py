import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from braingraph_bench.datasets import Subject, TimeSeriesDataset, generate_synthetic, zscore
from braingraph_bench.errors import ConfigurationError, MetricError, ProtocolError, SchemaError, SearchError
from braingraph_bench.experiments import (
    ExperimentReport,
    FoldResult,
    HyperGrid,
    ProtocolAudit,
    compute_metrics,
    confusion_counts,
    cross_validate,
    evaluate_loss,
    grid_search,
    mean_std,
    predict_labels,
    prepare_samples,
    read_fold_report,
    run_protocol,
    scaling_study,
    summarize_folds,
    threshold_sweep,
    train_model,
    write_fold_report,
    write_summary,
    write_sweep,
)
from braingraph_bench.graphs import ground_truth_adjacency, permuted_adjacency
from braingraph_bench.models import ModelSpec


def _make_separable(num_subjects: int = 24, num_rois: int = 4, timepoints: int = 40, seed: int = 0) -> TimeSeriesDataset:
    """Class 1 subjects share a common drive across ROIs, class 0 subjects do not."""
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(num_subjects):
        label = i % 2
        series = rng.normal(size=(timepoints, num_rois))
        if label:
            series = series + 2.0 * rng.normal(size=(timepoints, 1))
        subjects.append(Subject(f"s{i:03d}", label, "site0", zscore(series)))
    return TimeSeriesDataset(tuple(subjects), num_rois, source="test")


def _make_offset(num_subjects: int = 96, num_rois: int = 4, timepoints: int = 40, seed: int = 0) -> TimeSeriesDataset:
    """Class 1 series sit one unit above zero and class 0 series one unit below, left unstandardised."""
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(num_subjects):
        label = i % 2
        series = rng.normal(size=(timepoints, num_rois)) + (1.0 if label else -1.0)
        subjects.append(Subject(f"s{i:03d}", label, "site0", series))
    return TimeSeriesDataset(tuple(subjects), num_rois, source="test")


def _held_out_bal_acc(spec: ModelSpec, dataset: TimeSeriesDataset) -> float:
    train = prepare_samples(dataset, np.arange(0, 40), spec)
    val = prepare_samples(dataset, np.arange(40, 56), spec)
    test = prepare_samples(dataset, np.arange(56, len(dataset)), spec)
    model = train_model(spec, train, val, seed=0)
    counts = confusion_counts([s.label for s in test], predict_labels(model, test))
    return compute_metrics(*counts)[0]


def _tiny(family: str, **overrides) -> ModelSpec:
    values = {"family": family, "hidden_dim": 4, "learning_rate": 0.05, "max_epochs": 3, "batch_size": 8, "patience": 2}
    values.update(overrides)
    return ModelSpec.build(**values)


class MetricTests(unittest.TestCase):
    def test_balanced_accuracy_example(self) -> None:
        np.testing.assert_allclose(compute_metrics(tp=5, fp=2, tn=8, fn=5), (0.65, 0.5, 0.8))

    def test_perfect_and_constant_predictors(self) -> None:
        self.assertEqual(compute_metrics(4, 0, 4, 0), (1.0, 1.0, 1.0))
        self.assertEqual(compute_metrics(tp=5, fp=5, tn=0, fn=0), (0.5, 1.0, 0.0))

    def test_missing_class_is_an_error(self) -> None:
        with self.assertRaises(MetricError):
            compute_metrics(0, 3, 2, 0)
        with self.assertRaises(MetricError):
            compute_metrics(-1, 1, 1, 1)

    def test_confusion_counts(self) -> None:
        self.assertEqual(confusion_counts([1, 1, 0, 0, 1], [1, 0, 0, 1, 1]), (2, 1, 1, 1))

    def test_mean_std_uses_sample_deviation(self) -> None:
        self.assertEqual(mean_std([1.0, 2.0, 3.0]), (2.0, 1.0))
        self.assertEqual(mean_std([0.7]), (0.7, 0.0))


class HyperGridTests(unittest.TestCase):
    def test_combinations_sort_names_and_keep_axis_order(self) -> None:
        grid = HyperGrid("gcn", {"learning_rate": [0.1, 0.01], "hidden_dim": [8, 16]})
        self.assertEqual(
            grid.combinations(),
            [
                {"hidden_dim": 8, "learning_rate": 0.1},
                {"hidden_dim": 8, "learning_rate": 0.01},
                {"hidden_dim": 16, "learning_rate": 0.1},
                {"hidden_dim": 16, "learning_rate": 0.01},
            ],
        )
        self.assertEqual(len(grid), 4)

    def test_default_grids(self) -> None:
        self.assertEqual(len(HyperGrid.default("svm_rbf")), 12)
        self.assertEqual(len(HyperGrid.default("gcn")), 3 * 3 * 2 * 2 * 3 * 5)
        fixed = HyperGrid.default("mlp").with_fixed({"learning_rate": 0.01, "hidden_dim": 32, "dropout": 0.0})
        self.assertEqual(len(fixed), 2)

    def test_invalid_grids(self) -> None:
        with self.assertRaises(ConfigurationError):
            HyperGrid("gcn", {"depth": [1, 2]})
        with self.assertRaises(ConfigurationError):
            HyperGrid("gcn", {"hidden_dim": []})
        with self.assertRaises(ConfigurationError):
            HyperGrid.default("transformer")


class TrainingTests(unittest.TestCase):
    def setUp(self) -> None:
        self.dataset = _make_separable()
        self.train_idx, self.val_idx = np.arange(0, 16), np.arange(16, 24)

    def _samples(self, spec: ModelSpec):
        return (
            prepare_samples(self.dataset, self.train_idx, spec),
            prepare_samples(self.dataset, self.val_idx, spec),
        )

    def test_mlp_learns_separable_connectivity(self) -> None:
        spec = _tiny("mlp", max_epochs=40, patience=40)
        train, val = self._samples(spec)
        model = train_model(spec, train, val, seed=0)
        accuracy = np.mean(predict_labels(model, train) == np.array([s.label for s in train]))
        self.assertGreaterEqual(accuracy, 0.9)

    def test_returned_parameters_are_the_best_epoch(self) -> None:
        spec = _tiny("gcn", max_epochs=6, patience=2)
        train, val = self._samples(spec)
        model = train_model(spec, train, val, seed=1)
        val_losses = [record.val_loss for record in model.history]
        self.assertEqual(model.best_epoch, int(np.argmin(val_losses)))
        self.assertLessEqual(len(model.history), model.best_epoch + spec.patience + 1)
        self.assertAlmostEqual(evaluate_loss(spec, model.tensors(), val), model.best_val_loss, places=10)

    def test_training_is_deterministic(self) -> None:
        spec = _tiny("gin")
        train, val = self._samples(spec)
        first = train_model(spec, train, val, seed=7)
        second = train_model(spec, train, val, seed=7)
        self.assertEqual([r.val_loss for r in first.history], [r.val_loss for r in second.history])
        for name, value in first.parameters.items():
            np.testing.assert_array_equal(value, second.parameters[name])

    def test_svm_is_fitted_in_one_step(self) -> None:
        spec = ModelSpec.build(family="svm_rbf", C=10.0)
        train, val = self._samples(spec)
        model = train_model(spec, train, val, seed=0)
        self.assertEqual(len(model.history), 1)
        self.assertEqual(model.best_epoch, 0)

    def test_single_class_training_set(self) -> None:
        spec = _tiny("mlp")
        train = prepare_samples(self.dataset, [0, 2, 4], spec)
        val = prepare_samples(self.dataset, [1, 3], spec)
        with self.assertRaises(ConfigurationError):
            train_model(spec, train, val, seed=0)


class BaselineSanityTests(unittest.TestCase):
    def test_mlp_separates_held_out_connectivity(self) -> None:
        spec = _tiny("mlp", hidden_dim=8, learning_rate=0.01, max_epochs=100, patience=20)
        self.assertGreater(_held_out_bal_acc(spec, _make_separable(num_subjects=96)), 0.95)

    def test_cnn1d_separates_held_out_offsets(self) -> None:
        spec = _tiny("cnn1d", hidden_dim=8, learning_rate=0.01, max_epochs=100, patience=20)
        self.assertGreater(_held_out_bal_acc(spec, _make_offset()), 0.95)


class ParallelismTests(unittest.TestCase):
    def test_cross_validation_ignores_worker_count(self) -> None:
        dataset = _make_separable()
        spec = _tiny("gcn", max_epochs=3)
        serial = cross_validate(spec, dataset, k=3, seed=4, jobs=1)
        parallel = cross_validate(spec, dataset, k=3, seed=4, jobs=2)
        self.assertEqual(
            [(f.fold, f.tp, f.fp, f.tn, f.fn, f.best_epoch) for f in serial.folds],
            [(f.fold, f.tp, f.fp, f.tn, f.fn, f.best_epoch) for f in parallel.folds],
        )
        self.assertEqual(serial.metadata, parallel.metadata)

    def test_grid_search_ignores_worker_count(self) -> None:
        dataset = _make_separable()
        grid = HyperGrid("mlp", {"hidden_dim": [4, 8], "max_epochs": [3]})
        serial = grid_search("mlp", grid, dataset, np.arange(0, 16), np.arange(16, 24), seed=2, jobs=1)
        parallel = grid_search("mlp", grid, dataset, np.arange(0, 16), np.arange(16, 24), seed=2, jobs=2)
        self.assertEqual(serial.best, parallel.best)
        np.testing.assert_allclose(
            [p.val_loss for p in serial.points], [p.val_loss for p in parallel.points], rtol=1e-12
        )


class GridSearchTests(unittest.TestCase):
    def setUp(self) -> None:
        self.dataset = _make_separable()
        self.train_idx, self.val_idx = np.arange(0, 16), np.arange(16, 24)

    def test_single_point_grid(self) -> None:
        grid = HyperGrid("mlp", {"hidden_dim": [4], "max_epochs": [2]})
        result = grid_search("mlp", grid, self.dataset, self.train_idx, self.val_idx, seed=0)
        self.assertEqual(len(result.points), 1)
        self.assertEqual(result.best.hidden_dim, 4)
        self.assertEqual(result.best.max_epochs, 2)

    def test_aborted_points_rank_last(self) -> None:
        # a kernel longer than the first strided output cannot be applied twice
        grid = HyperGrid("cnn1d", {"kernel_size": [25, 3], "hidden_dim": [4], "max_epochs": [2]})
        result = grid_search("cnn1d", grid, self.dataset, self.train_idx, self.val_idx, seed=0)
        self.assertEqual(result.best.kernel_size, 3)
        self.assertIsNotNone(result.points[0].error)
        self.assertEqual(result.points[0].val_loss, float("inf"))

    def test_all_points_aborted(self) -> None:
        grid = HyperGrid("cnn1d", {"kernel_size": [25], "max_epochs": [2]})
        with self.assertRaises(SearchError):
            grid_search("cnn1d", grid, self.dataset, self.train_idx, self.val_idx, seed=0)

    def test_grid_family_must_match(self) -> None:
        with self.assertRaises(ConfigurationError):
            grid_search("gat", HyperGrid("gcn", {}), self.dataset, self.train_idx, self.val_idx, seed=0)


class ProtocolTests(unittest.TestCase):
    def test_cross_validation_reports_every_fold(self) -> None:
        dataset = _make_separable()
        report = cross_validate(_tiny("mlp"), dataset, k=3, seed=0)
        self.assertEqual(len(report.folds), 3)
        self.assertEqual(report.aborted, [])
        total = 0
        for fold in report.folds:
            counts = (fold.tp, fold.fp, fold.tn, fold.fn)
            total += sum(counts)
            self.assertEqual(fold.bal_acc, compute_metrics(*counts)[0])
        self.assertEqual(total, len(dataset))
        self.assertEqual(report.metadata["dataset_hash"], dataset.content_hash())

    def test_chosen_hparams_include_default_values(self) -> None:
        report = cross_validate(_tiny("mlp"), _make_separable(), k=2, seed=0)
        chosen = report.folds[0].chosen_hparams
        self.assertEqual(chosen["hidden_dim"], 4)
        self.assertEqual(chosen["dropout"], 0.0)
        self.assertEqual(chosen["weight_decay"], 0.0)
        self.assertNotIn("family", chosen)

    def test_true_and_permuted_adjacency_share_every_fold(self) -> None:
        synthetic = generate_synthetic(24, 6, 60, 0.5, seed=0)
        truth = ground_truth_adjacency(synthetic.ground_truth)
        null = permuted_adjacency(truth, np.random.default_rng(1))
        spec = _tiny("gcn", max_epochs=2)
        audits = {"truth": ProtocolAudit(), "null": ProtocolAudit()}
        reports = {
            "truth": cross_validate(spec, synthetic.dataset, k=2, seed=0, fixed_adjacency=truth, audit=audits["truth"]),
            "null": cross_validate(spec, synthetic.dataset, k=2, seed=0, fixed_adjacency=null, audit=audits["null"]),
        }
        self.assertEqual(audits["truth"].folds, audits["null"].folds)
        for report in reports.values():
            self.assertEqual(report.aborted, [])
            self.assertEqual(sum(f.tp + f.fp + f.tn + f.fn for f in report.folds), 24)
        graph = prepare_samples(synthetic.dataset, [0], spec, fixed_adjacency=null)[0].inputs
        self.assertEqual(int(np.count_nonzero(graph.raw_adjacency.values)), int(np.count_nonzero(truth.values)))

    def test_audit_detects_leaks(self) -> None:
        audit = ProtocolAudit()
        audit.record_selection([1, 2])
        audit.record_fold(0, train=[3, 4], val=[5], test=[2, 6])
        with self.assertRaises(ProtocolError):
            audit.verify()

        audit = ProtocolAudit()
        audit.record_fold(0, train=[1], val=[2], test=[3])
        audit.record_fold(1, train=[1], val=[2], test=[3])
        with self.assertRaises(ProtocolError):
            audit.verify()

        audit = ProtocolAudit()
        audit.record_fold(0, train=[1, 3], val=[2], test=[3])
        with self.assertRaises(ProtocolError):
            audit.verify()

    def test_selection_never_touches_test_subjects(self) -> None:
        dataset = _make_separable(num_subjects=40)
        grid = HyperGrid("mlp", {"hidden_dim": [4], "max_epochs": [2], "learning_rate": [0.05, 0.01]})
        result = run_protocol("mlp", dataset, grid, seed=3, folds=3)
        self.assertIsNotNone(result.search)
        self.assertEqual(len(result.search.points), 2)
        dev = set(result.dev_indices.tolist())
        self.assertEqual(len(dev), 6)
        for sets in result.audit.folds.values():
            self.assertFalse(sets["test"] & dev)
            self.assertFalse(sets["train"] & dev)
        tests = set().union(*(sets["test"] for sets in result.audit.folds.values()))
        self.assertEqual(len(tests), 34)

    def test_reused_dev_slice_joins_training_only(self) -> None:
        dataset = _make_separable(num_subjects=40)
        grid = HyperGrid("mlp", {"hidden_dim": [4], "max_epochs": [2]})
        result = run_protocol("mlp", dataset, grid, seed=3, folds=3, reuse_val_in_cv=True)
        dev = set(result.dev_indices.tolist())
        for sets in result.audit.folds.values():
            self.assertTrue(dev <= sets["train"])
            self.assertFalse(sets["test"] & dev)
        self.assertTrue(result.report.metadata["reuse_val_in_cv"])

    def test_without_search_every_subject_is_tested(self) -> None:
        dataset = _make_separable()
        grid = HyperGrid("mlp", {"hidden_dim": [4], "max_epochs": [2]})
        result = run_protocol("mlp", dataset, grid, seed=0, folds=3, search=False)
        self.assertIsNone(result.search)
        self.assertEqual(len(result.dev_indices), 0)
        self.assertEqual(sum(f.tp + f.fp + f.tn + f.fn for f in result.report.folds), 24)


class StudyTests(unittest.TestCase):
    def test_scaling_uses_nested_subsets_and_one_test_set(self) -> None:
        dataset = _make_separable(num_subjects=40)
        specs = [_tiny("mlp"), ModelSpec.build(family="svm_rbf")]
        result = scaling_study(specs, dataset, sizes=[8, 16], test_size=10, seed=0)
        self.assertEqual(set(result.results), {"mlp", "svm_rbf"})
        self.assertEqual(sorted(result.subset_hashes), [8, 16])
        for family in ("mlp", "svm_rbf"):
            self.assertEqual([size for size, _ in result.results[family]], [8, 16])
            for _, fold in result.results[family]:
                self.assertEqual(fold.tp + fold.fp + fold.tn + fold.fn, 10)
        sizes, scores = result.curve("svm_rbf")
        self.assertEqual(sizes, [8, 16])
        self.assertEqual(len(scores), 2)

    def test_svm_does_not_lose_accuracy_with_more_subjects(self) -> None:
        dataset = _make_separable(num_subjects=48)
        result = scaling_study([ModelSpec.build(family="svm_rbf")], dataset, sizes=[8, 24], test_size=16, seed=0)
        _, scores = result.curve("svm_rbf")
        self.assertGreaterEqual(scores[1], scores[0] - 0.03)
        self.assertGreaterEqual(scores[1], 0.9)

    def test_threshold_sweep_has_one_row_per_cell(self) -> None:
        dataset = _make_separable()
        rows = threshold_sweep(_tiny("gcn", max_epochs=2), dataset, [0.5], arms=("none", "heat"), seed=0, folds=2)
        self.assertEqual([(r.keep_fraction, r.diffusion) for r in rows], [(0.5, "none"), (0.5, "heat")])
        self.assertEqual(rows[0].removed_fraction, 0.5)
        with tempfile.TemporaryDirectory() as tmpdir:
            frame = pd.read_csv(write_sweep(rows, Path(tmpdir) / "sweep.csv"))
        self.assertEqual(list(frame["diffusion"]), ["none", "heat"])

    def test_sweep_needs_a_thresholded_family(self) -> None:
        with self.assertRaises(ConfigurationError):
            threshold_sweep(_tiny("mlp"), _make_separable(), [0.5])


class ReportFileTests(unittest.TestCase):
    def _report(self) -> ExperimentReport:
        folds = [
            FoldResult.from_predictions(0, [1, 1, 0, 0], [1, 1, 0, 0], {"hidden_dim": 4}, 2),
            FoldResult.from_predictions(1, [1, 1, 0, 0], [1, 0, 0, 0], {"hidden_dim": 4}, 1),
            FoldResult(2, chosen_hparams={"hidden_dim": 4}, error="non-finite loss"),
        ]
        return ExperimentReport("cv", "gcn", folds)

    def test_summary_skips_aborted_folds(self) -> None:
        report = self._report()
        with tempfile.TemporaryDirectory() as tmpdir:
            folds_path = write_fold_report([report], Path(tmpdir) / "report_folds.csv")
            summary_path = write_summary([report], Path(tmpdir) / "report_summary.csv")
            frame = read_fold_report(folds_path)
            written = pd.read_csv(summary_path)
        self.assertEqual(len(frame), 3)
        recomputed = summarize_folds(frame)
        bal_acc = recomputed[recomputed["metric"] == "bal_acc"].iloc[0]
        self.assertAlmostEqual(bal_acc["mean"], 0.875)
        self.assertAlmostEqual(bal_acc["std"], float(np.std([1.0, 0.75], ddof=1)))
        self.assertAlmostEqual(written[written["metric"] == "bal_acc"]["mean"].iloc[0], 0.875)

    def test_missing_columns_are_schema_errors(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "folds.csv"
            path.write_text("family,fold\ngcn,0\n", encoding="utf-8")
            with self.assertRaises(SchemaError):
                read_fold_report(path)
            with self.assertRaises(SchemaError):
                read_fold_report(Path(tmpdir) / "absent.csv")


if __name__ == "__main__":
    unittest.main()
