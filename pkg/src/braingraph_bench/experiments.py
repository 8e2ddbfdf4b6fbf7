"""Training loop, model selection and the cross-validated benchmark protocol."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from braingraph_bench.datasets import (
    INNER_VAL_FRACTION,
    TimeSeriesDataset,
    holdout_split,
    index_hash,
    inner_split,
    stratified_kfold,
    subsample_train,
)
from braingraph_bench.errors import (
    ConfigurationError,
    ContractError,
    MetricError,
    ProtocolError,
    SchemaError,
    SearchError,
    TrainingError,
)
from braingraph_bench.graphs import (
    Adjacency,
    DiffusionConfig,
    build_dynamic_graph,
    build_static_graph,
    lower_triangle,
    pearson_fc,
)
from braingraph_bench.models import (
    ALL_FAMILIES,
    EpochRecord,
    ModelSpec,
    TrainedModel,
    init_model_params,
    model_logit,
)
from braingraph_bench.numerics import (
    ComputationTape,
    OptimizerState,
    adam_step,
    add,
    bce_with_logits,
    derive_seed,
    make_rng,
    mul,
)
from braingraph_bench.svm import decision_function, svm_rbf_train

logger = logging.getLogger(__name__)

METRICS = ("bal_acc", "sens", "spec")
FOLD_COLUMNS = ("experiment", "family", "fold", "tp", "fp", "tn", "fn", "bal_acc", "sens", "spec", "chosen_hparams")
SUMMARY_COLUMNS = ("family", "metric", "mean", "std")
ABORTED_COLUMNS = ("experiment", "family", "fold", "error")
SWEEP_COLUMNS = ("keep_fraction", "removed_fraction", "diffusion", "mean_bal_acc", "std_bal_acc", "aborted")
SCALING_COLUMNS = (
    "family", "size", "tp", "fp", "tn", "fn", "bal_acc", "sens", "spec", "test_hash", "subset_hash", "error",
)

_SHARED_AXES: dict[str, list[Any]] = {
    "learning_rate": [1e-2, 1e-3, 1e-4],
    "hidden_dim": [32, 64, 128],
    "dropout": [0.0, 0.3],
    "weight_decay": [0.0, 1e-4],
}
_GRAPH_AXES: dict[str, list[Any]] = {
    "readout": ["mean", "mean_cat_max", "sum"],
    "keep_fraction": [0.85, 0.70, 0.50, 0.25, 0.10],
}
_TEMPORAL_AXES: dict[str, list[Any]] = {"blocks": [1, 2, 3], "kernel_size": [3, 5, 7]}
_FAMILY_AXES: dict[str, dict[str, list[Any]]] = {
    "gcn": {**_SHARED_AXES, **_GRAPH_AXES},
    "gat": {**_SHARED_AXES, **_GRAPH_AXES, "heads": [1, 2, 4]},
    "gin": {**_SHARED_AXES, **_GRAPH_AXES},
    "stgcn": {**_SHARED_AXES, **_GRAPH_AXES, **_TEMPORAL_AXES},
    "astgcn": {
        **_SHARED_AXES,
        "readout": _GRAPH_AXES["readout"],
        **_TEMPORAL_AXES,
        "embedding_dim": [8, 16, 32],
        "normalizer": ["softmax", "sparsemax"],
    },
    "mlp": dict(_SHARED_AXES),
    "cnn1d": {**_SHARED_AXES, "kernel_size": [3, 5, 7]},
    # gamma None resolves to 1/P at fit time
    "svm_rbf": {"C": [0.1, 1.0, 10.0, 100.0], "gamma": [None, 0.01, 0.001]},
}


# --------------------------------------------------------------------------
# Hyperparameter grid
# --------------------------------------------------------------------------


@dataclass(slots=True)
class HyperGrid:
    family: str
    axes: dict[str, list[Any]]

    def __post_init__(self) -> None:
        if self.family not in ALL_FAMILIES:
            raise ConfigurationError(f"unknown model family {self.family!r}")
        known = set(ModelSpec.model_fields) - {"family"}
        for name, values in self.axes.items():
            if name not in known:
                raise ConfigurationError(f"{name!r} is not a hyperparameter")
            if not values:
                raise ConfigurationError(f"grid axis {name!r} has no values")

    @classmethod
    def default(cls, family: str) -> "HyperGrid":
        if family not in _FAMILY_AXES:
            raise ConfigurationError(f"unknown model family {family!r}")
        return cls(family, {name: list(values) for name, values in _FAMILY_AXES[family].items()})

    def with_overrides(self, overrides: Mapping[str, Sequence[Any]]) -> "HyperGrid":
        return HyperGrid(self.family, {**self.axes, **{k: list(v) for k, v in overrides.items()}})

    def with_fixed(self, fixed: Mapping[str, Any]) -> "HyperGrid":
        return self.with_overrides({name: [value] for name, value in fixed.items()})

    def combinations(self) -> list[dict[str, Any]]:
        """Every point, parameter names sorted, each axis in its listed order."""
        names = sorted(self.axes)
        return [dict(zip(names, values)) for values in itertools.product(*(self.axes[n] for n in names))]

    def specs(self) -> list[ModelSpec]:
        return [ModelSpec.build(family=self.family, **combo) for combo in self.combinations()]

    def __len__(self) -> int:
        return int(np.prod([len(v) for v in self.axes.values()])) if self.axes else 1


# --------------------------------------------------------------------------
# Samples
# --------------------------------------------------------------------------


@dataclass(slots=True)
class Sample:
    index: int
    subject_id: str
    label: int
    inputs: Any


def prepare_samples(
    dataset: TimeSeriesDataset,
    indices: Iterable[int],
    spec: ModelSpec,
    fixed_adjacency: Adjacency | None = None,
) -> list[Sample]:
    """Featurise the selected subjects the way `spec.family` consumes them."""
    samples = []
    diffusion = spec.diffusion
    for index in indices:
        subject = dataset.subjects[int(index)]
        if spec.family in ("gcn", "gat", "gin"):
            inputs = build_static_graph(
                subject, spec.keep_fraction, diffusion, by_magnitude=spec.by_magnitude, raw_override=fixed_adjacency
            )
        elif spec.family == "stgcn":
            inputs = build_dynamic_graph(
                subject, spec.keep_fraction, diffusion, by_magnitude=spec.by_magnitude, raw_override=fixed_adjacency
            )
        elif spec.family == "astgcn":
            inputs = build_dynamic_graph(subject, None, adaptive=True)
        elif spec.family in ("mlp", "svm_rbf"):
            inputs = lower_triangle(pearson_fc(subject.timecourses))
        else:
            inputs = np.ascontiguousarray(subject.timecourses.T)
        samples.append(Sample(int(index), subject.subject_id, subject.label, inputs))
    return samples


# --------------------------------------------------------------------------
# Metrics and results
# --------------------------------------------------------------------------


def compute_metrics(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float, float]:
    """(balanced accuracy, sensitivity, specificity) from confusion counts."""
    if min(tp, fp, tn, fn) < 0:
        raise MetricError("confusion counts must be non-negative")
    if tp + fn == 0 or tn + fp == 0:
        raise MetricError(f"both classes must be present (TP+FN={tp + fn}, TN+FP={tn + fp})")
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    return (sens + spec) / 2.0, sens, spec


def confusion_counts(labels: Sequence[int], predicted: Sequence[int]) -> tuple[int, int, int, int]:
    labels = np.asarray(labels, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    tp = int(np.sum((labels == 1) & (predicted == 1)))
    fp = int(np.sum((labels == 0) & (predicted == 1)))
    tn = int(np.sum((labels == 0) & (predicted == 0)))
    fn = int(np.sum((labels == 1) & (predicted == 0)))
    return tp, fp, tn, fn


def _hparams(spec: ModelSpec) -> dict[str, Any]:
    return spec.model_dump(exclude={"family"})


@dataclass(slots=True)
class FoldResult:
    fold: int
    tp: int | None = None
    fp: int | None = None
    tn: int | None = None
    fn: int | None = None
    bal_acc: float | None = None
    sens: float | None = None
    spec: float | None = None
    chosen_hparams: dict[str, Any] = field(default_factory=dict)
    best_epoch: int | None = None
    error: str | None = None

    @property
    def aborted(self) -> bool:
        return self.error is not None

    @classmethod
    def from_predictions(
        cls, fold: int, labels: Sequence[int], predicted: Sequence[int], hparams: dict[str, Any], best_epoch: int
    ) -> "FoldResult":
        tp, fp, tn, fn = confusion_counts(labels, predicted)
        bal_acc, sens, spec = compute_metrics(tp, fp, tn, fn)
        return cls(fold, tp, fp, tn, fn, bal_acc, sens, spec, hparams, best_epoch)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for fewer than two values)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    std = float(np.std(values, ddof=1)) if values.size >= 2 else 0.0
    return float(np.mean(values)), std


@dataclass(slots=True)
class ExperimentReport:
    experiment: str
    family: str
    folds: list[FoldResult]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def completed(self) -> list[FoldResult]:
        return [f for f in self.folds if not f.aborted]

    @property
    def aborted(self) -> list[FoldResult]:
        return [f for f in self.folds if f.aborted]

    def summary(self) -> dict[str, tuple[float, float]]:
        return {metric: mean_std([getattr(f, metric) for f in self.completed]) for metric in METRICS}


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _check_training_sets(train: Sequence[Sample], val: Sequence[Sample]) -> None:
    if not train or not val:
        raise ContractError("training and validation sets must both be non-empty")
    overlap = {s.subject_id for s in train} & {s.subject_id for s in val}
    if overlap:
        raise ContractError(f"training and validation sets share subjects: {sorted(overlap)[:5]}")
    if len({s.label for s in train}) < 2:
        raise ConfigurationError("the training set needs both classes")


def _svm_loss(margins: np.ndarray, labels: np.ndarray) -> float:
    signed = np.where(labels == 1, 1.0, -1.0)
    return float(np.mean(np.logaddexp(0.0, -signed * margins)))


def _train_svm(spec: ModelSpec, train: Sequence[Sample], val: Sequence[Sample]) -> TrainedModel:
    features = np.stack([s.inputs for s in train])
    labels = np.array([s.label for s in train])
    model = svm_rbf_train(features, labels, C=spec.C, gamma=spec.gamma)
    val_features = np.stack([s.inputs for s in val])
    val_labels = np.array([s.label for s in val])
    record = EpochRecord(
        0,
        _svm_loss(decision_function(model, features), labels),
        _svm_loss(decision_function(model, val_features), val_labels),
    )
    return TrainedModel(spec, model.to_parameters(), [record], best_epoch=0)


def evaluate_loss(spec: ModelSpec, params, samples: Sequence[Sample]) -> float:
    total = 0.0
    for sample in samples:
        total += bce_with_logits(model_logit(spec, params, sample.inputs), float(sample.label)).item()
    return total / len(samples)


def train_model(spec: ModelSpec, train: Sequence[Sample], val: Sequence[Sample], seed: int) -> TrainedModel:
    """Adam on mean binary cross-entropy with early stopping on validation loss.

    The returned model holds the parameters of the epoch with the lowest
    validation loss. A non-finite loss or gradient raises `TrainingError`.
    """
    _check_training_sets(train, val)
    if spec.family == "svm_rbf":
        return _train_svm(spec, train, val)

    params = init_model_params(spec, train[0].inputs, make_rng(seed, "init", spec.family))
    state = OptimizerState(spec.learning_rate, spec.weight_decay)
    shuffle_rng = make_rng(seed, "shuffle")
    dropout_rng = make_rng(seed, "dropout")

    history: list[EpochRecord] = []
    best_loss = float("inf")
    best_epoch = 0
    best_params = {name: p.value.copy() for name, p in params.items()}
    for epoch in range(spec.max_epochs):
        order = shuffle_rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), spec.batch_size):
            batch = order[start:start + spec.batch_size]
            with ComputationTape() as tape:
                total = None
                for i in batch:
                    logit = model_logit(spec, params, train[i].inputs, dropout_rng)
                    loss = bce_with_logits(logit, float(train[i].label))
                    total = loss if total is None else add(total, loss)
                mean_loss = mul(total, 1.0 / len(batch))
                grads = tape.backward(mean_loss, params)
            adam_step(params, grads, state)
            epoch_loss += mean_loss.item() * len(batch)

        val_loss = evaluate_loss(spec, params, val)
        history.append(EpochRecord(epoch, epoch_loss / len(train), val_loss))
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = {name: p.value.copy() for name, p in params.items()}
        elif epoch - best_epoch >= spec.patience:
            logger.debug("Early stop at epoch %d (best %d, val loss %.4f)", epoch, best_epoch, best_loss)
            break
    return TrainedModel(spec, best_params, history, best_epoch)


def predict_labels(model: TrainedModel, samples: Sequence[Sample]) -> np.ndarray:
    return np.array([model.predict(s.inputs).label for s in samples], dtype=int)


# --------------------------------------------------------------------------
# Grid search
# --------------------------------------------------------------------------


@dataclass(slots=True)
class GridPoint:
    hparams: dict[str, Any]
    val_loss: float
    best_epoch: int | None = None
    error: str | None = None


@dataclass(slots=True)
class SearchResult:
    best: ModelSpec
    points: list[GridPoint]

    @property
    def best_point(self) -> GridPoint:
        return min(self.points, key=lambda p: p.val_loss)


def _evaluate_point(
    combo: dict[str, Any],
    family: str,
    dataset: TimeSeriesDataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    seed: int,
    fixed_adjacency: Adjacency | None,
) -> GridPoint:
    try:
        spec = ModelSpec.build(family=family, **combo)
        train = prepare_samples(dataset, train_idx, spec, fixed_adjacency)
        val = prepare_samples(dataset, val_idx, spec, fixed_adjacency)
        model = train_model(spec, train, val, seed)
    except (TrainingError, ConfigurationError) as exc:
        logger.warning("Grid point %s aborted: %s", combo, exc)
        return GridPoint(combo, float("inf"), error=str(exc))
    logger.debug("Grid point %s: val loss %.4f at epoch %d", combo, model.best_val_loss, model.best_epoch)
    return GridPoint(combo, model.best_val_loss, model.best_epoch)


def grid_search(
    family: str,
    grid: HyperGrid,
    dataset: TimeSeriesDataset,
    train_idx: Sequence[int],
    val_idx: Sequence[int],
    seed: int,
    *,
    jobs: int = 1,
    fixed_adjacency: Adjacency | None = None,
) -> SearchResult:
    """Train every grid point and keep the lowest best-epoch validation loss.

    Ties go to the first point enumerated; aborted points rank last.
    """
    if grid.family != family:
        raise ConfigurationError(f"grid is for {grid.family}, search asked for {family}")
    combos = grid.combinations()
    train_idx, val_idx = np.asarray(train_idx), np.asarray(val_idx)
    point_seed = derive_seed(seed, "grid-search")
    points = Parallel(n_jobs=jobs)(
        delayed(_evaluate_point)(combo, family, dataset, train_idx, val_idx, point_seed, fixed_adjacency)
        for combo in combos
    )
    finite = [i for i, p in enumerate(points) if p.error is None and np.isfinite(p.val_loss)]
    if not finite:
        raise SearchError(f"all {len(points)} grid points for {family} aborted")
    chosen = min(finite, key=lambda i: (points[i].val_loss, i))
    logger.info("Grid search for %s picked %s (val loss %.4f)", family, combos[chosen], points[chosen].val_loss)
    return SearchResult(ModelSpec.build(family=family, **combos[chosen]), list(points))


# --------------------------------------------------------------------------
# Protocol audit
# --------------------------------------------------------------------------


@dataclass(slots=True)
class ProtocolAudit:
    """Index sets touched by model selection and by each outer fold."""

    selection: set[int] = field(default_factory=set)
    folds: dict[int, dict[str, set[int]]] = field(default_factory=dict)

    def record_selection(self, *index_sets: Iterable[int]) -> None:
        for indices in index_sets:
            self.selection.update(int(i) for i in indices)

    def record_fold(self, fold: int, train: Iterable[int], val: Iterable[int], test: Iterable[int]) -> None:
        self.folds[fold] = {
            "train": {int(i) for i in train},
            "val": {int(i) for i in val},
            "test": {int(i) for i in test},
        }

    def verify(self) -> None:
        seen_tests: set[int] = set()
        for fold, sets in sorted(self.folds.items()):
            test = sets["test"]
            for role in ("train", "val"):
                leaked = test & sets[role]
                if leaked:
                    raise ProtocolError(f"fold {fold}: test indices {sorted(leaked)[:5]} also in {role}")
            leaked = test & self.selection
            if leaked:
                raise ProtocolError(f"fold {fold}: test indices {sorted(leaked)[:5]} were used for model selection")
            if sets["train"] & sets["val"]:
                raise ProtocolError(f"fold {fold}: train and validation overlap")
            if test & seen_tests:
                raise ProtocolError(f"fold {fold}: test indices repeat across folds")
            seen_tests |= test


# --------------------------------------------------------------------------
# Cross-validation
# --------------------------------------------------------------------------


def _run_fold(
    fold: int,
    spec: ModelSpec,
    dataset: TimeSeriesDataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    test_idx: np.ndarray,
    seed: int,
    fixed_adjacency: Adjacency | None,
) -> FoldResult:
    hparams = _hparams(spec)
    try:
        train = prepare_samples(dataset, train_idx, spec, fixed_adjacency)
        val = prepare_samples(dataset, val_idx, spec, fixed_adjacency)
        test = prepare_samples(dataset, test_idx, spec, fixed_adjacency)
        model = train_model(spec, train, val, derive_seed(seed, "fold", fold))
        predicted = predict_labels(model, test)
    except TrainingError as exc:
        logger.warning("Fold %d of %s aborted: %s", fold, spec.family, exc)
        return FoldResult(fold, chosen_hparams=hparams, error=str(exc))
    result = FoldResult.from_predictions(fold, [s.label for s in test], predicted, hparams, model.best_epoch)
    logger.info("Fold %d of %s: bal_acc %.3f", fold, spec.family, result.bal_acc)
    return result


def cross_validate(
    spec: ModelSpec,
    dataset: TimeSeriesDataset,
    k: int = 5,
    seed: int = 0,
    *,
    pool: Sequence[int] | None = None,
    extra_train: Sequence[int] | None = None,
    fixed_adjacency: Adjacency | None = None,
    audit: ProtocolAudit | None = None,
    jobs: int = 1,
    experiment: str = "cv",
) -> ExperimentReport:
    """Outer stratified k-fold CV with an 85/15 inner split; hyperparameters stay fixed.

    `pool` restricts CV to a subset of the dataset (indices stay global);
    `extra_train` indices join every fold's training portion only.
    """
    pool = np.arange(len(dataset)) if pool is None else np.sort(np.asarray(pool, dtype=int))
    extra = np.asarray([] if extra_train is None else extra_train, dtype=int)
    plan = stratified_kfold(dataset.subset(pool), k, seed)
    audit = audit if audit is not None else ProtocolAudit()

    jobs_args = []
    for split in plan.folds:
        train = np.concatenate([pool[split.train], extra])
        val, test = pool[split.val], pool[split.test]
        audit.record_fold(split.fold, train, val, test)
        jobs_args.append((split.fold, train, val, test))
    audit.verify()

    folds = Parallel(n_jobs=jobs)(
        delayed(_run_fold)(fold, spec, dataset, train, val, test, seed, fixed_adjacency)
        for fold, train, val, test in jobs_args
    )
    metadata = {
        "seed": seed,
        "folds": k,
        "dataset_hash": dataset.content_hash(),
        "spec": json.dumps(spec.model_dump(), sort_keys=True),
    }
    return ExperimentReport(experiment, spec.family, list(folds), metadata)


@dataclass(slots=True)
class ProtocolResult:
    report: ExperimentReport
    search: SearchResult | None
    audit: ProtocolAudit
    dev_indices: np.ndarray


def run_protocol(
    family: str,
    dataset: TimeSeriesDataset,
    grid: HyperGrid,
    seed: int,
    *,
    folds: int = 5,
    search: bool = True,
    reuse_val_in_cv: bool = False,
    fixed_adjacency: Adjacency | None = None,
    jobs: int = 1,
    experiment: str = "benchmark",
) -> ProtocolResult:
    """Dev-slice grid search followed by cross-validation of the chosen spec.

    Without search the first grid point is cross-validated on every subject.
    """
    audit = ProtocolAudit()
    if search:
        pool, dev = holdout_split(dataset, INNER_VAL_FRACTION, seed)
        dev_train, dev_val = inner_split(dev, dataset.labels, derive_seed(seed, "dev-split"))
        audit.record_selection(dev_train, dev_val)
        result = grid_search(
            family, grid, dataset, dev_train, dev_val, seed, jobs=jobs, fixed_adjacency=fixed_adjacency
        )
        spec = result.best
    else:
        pool, dev = np.arange(len(dataset)), np.array([], dtype=int)
        result = None
        spec = ModelSpec.build(family=family, **grid.combinations()[0])

    report = cross_validate(
        spec,
        dataset,
        folds,
        seed,
        pool=pool,
        extra_train=dev if reuse_val_in_cv else None,
        fixed_adjacency=fixed_adjacency,
        audit=audit,
        jobs=jobs,
        experiment=experiment,
    )
    report.metadata["search"] = search
    report.metadata["reuse_val_in_cv"] = reuse_val_in_cv
    report.metadata["dev_hash"] = index_hash(dev)
    return ProtocolResult(report, result, audit, dev)


# --------------------------------------------------------------------------
# Scaling study and threshold sweep
# --------------------------------------------------------------------------


@dataclass(slots=True)
class ScalingResult:
    test_hash: str
    subset_hashes: dict[int, str]
    results: dict[str, list[tuple[int, FoldResult]]]

    def curve(self, family: str) -> tuple[list[int], list[float]]:
        points = [(size, r.bal_acc) for size, r in self.results[family] if not r.aborted]
        return [p[0] for p in points], [p[1] for p in points]


def _check_nested(subsets: dict[int, np.ndarray], test: np.ndarray) -> None:
    sizes = sorted(subsets)
    for smaller, larger in zip(sizes, sizes[1:]):
        if not np.all(np.isin(subsets[smaller], subsets[larger])):
            raise ProtocolError(f"training subset {smaller} is not contained in subset {larger}")
    for size in sizes:
        if np.intersect1d(subsets[size], test).size:
            raise ProtocolError(f"training subset {size} overlaps the fixed test set")


def _scaling_point(
    spec: ModelSpec,
    size: int,
    dataset: TimeSeriesDataset,
    subset: np.ndarray,
    test_idx: np.ndarray,
    seed: int,
) -> tuple[int, FoldResult]:
    train_idx, val_idx = inner_split(subset, dataset.labels, derive_seed(seed, "scaling-inner", size))
    return size, _run_fold(size, spec, dataset, train_idx, val_idx, test_idx, derive_seed(seed, "scaling"), None)


def scaling_study(
    specs: Sequence[ModelSpec],
    dataset: TimeSeriesDataset,
    sizes: Sequence[int],
    test_size: int,
    seed: int,
    *,
    jobs: int = 1,
) -> ScalingResult:
    """Train every family on nested subsets and score all of them on one fixed test set."""
    plan = subsample_train(dataset, sizes, test_size, seed)
    _check_nested(plan.subsets, plan.test)
    tasks = [(spec, size) for spec in specs for size in sorted(plan.subsets)]
    outcomes = Parallel(n_jobs=jobs)(
        delayed(_scaling_point)(spec, size, dataset, plan.subsets[size], plan.test, seed) for spec, size in tasks
    )
    results: dict[str, list[tuple[int, FoldResult]]] = {spec.family: [] for spec in specs}
    for (spec, _), outcome in zip(tasks, outcomes):
        results[spec.family].append(outcome)
    return ScalingResult(
        test_hash=index_hash(plan.test),
        subset_hashes={size: index_hash(idx) for size, idx in plan.subsets.items()},
        results=results,
    )


@dataclass(slots=True)
class SweepRow:
    keep_fraction: float
    diffusion: str
    mean_bal_acc: float
    std_bal_acc: float
    aborted: int = 0

    @property
    def removed_fraction(self) -> float:
        return round(1.0 - self.keep_fraction, 12)


def _diffusion_overrides(arm: str) -> dict[str, Any]:
    config = DiffusionConfig.parse(arm)
    return {
        "diffusion_scheme": config.scheme,
        "diffusion_t": config.t,
        "diffusion_alpha": config.alpha,
        "diffusion_transition": config.transition,
        "diffusion_order": config.order,
    }


def threshold_sweep(
    spec: ModelSpec,
    dataset: TimeSeriesDataset,
    keep_fractions: Sequence[float],
    arms: Sequence[str] = ("none", "heat"),
    seed: int = 0,
    *,
    folds: int = 5,
    jobs: int = 1,
) -> list[SweepRow]:
    """Cross-validate `spec` at each keep fraction with and without diffusion."""
    if spec.family not in ("gcn", "gat", "gin", "stgcn"):
        raise ConfigurationError(f"{spec.family} does not use a thresholded adjacency")
    if not keep_fractions:
        raise ConfigurationError("threshold sweep needs at least one keep fraction")
    rows = []
    for fraction in keep_fractions:
        for arm in arms:
            cell = spec.with_overrides(keep_fraction=float(fraction), **_diffusion_overrides(arm))
            report = cross_validate(cell, dataset, folds, seed, jobs=jobs, experiment=f"sweep-{arm}-{fraction:g}")
            mean, std = report.summary()["bal_acc"]
            rows.append(SweepRow(float(fraction), arm, mean, std, len(report.aborted)))
            logger.info("Sweep keep=%.2f diffusion=%s: bal_acc %.3f +- %.3f", fraction, arm, mean, std)
    return rows


# --------------------------------------------------------------------------
# Report files
# --------------------------------------------------------------------------


def _cell(value: Any) -> Any:
    return "" if value is None else value


def fold_rows(reports: Iterable[ExperimentReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        for fold in report.folds:
            rows.append(
                {
                    "experiment": report.experiment,
                    "family": report.family,
                    "fold": fold.fold,
                    **{name: _cell(getattr(fold, name)) for name in ("tp", "fp", "tn", "fn", *METRICS)},
                    "chosen_hparams": json.dumps(fold.chosen_hparams, sort_keys=True),
                }
            )
    return pd.DataFrame(rows, columns=list(FOLD_COLUMNS))


def write_fold_report(reports: Iterable[ExperimentReport], path: str | Path) -> Path:
    path = Path(path)
    fold_rows(reports).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
    return path


def write_aborted(reports: Iterable[ExperimentReport], path: str | Path) -> Path:
    path = Path(path)
    rows = [
        {"experiment": r.experiment, "family": r.family, "fold": f.fold, "error": f.error}
        for r in reports
        for f in r.aborted
    ]
    pd.DataFrame(rows, columns=list(ABORTED_COLUMNS)).to_csv(path, index=False, lineterminator="\n")
    return path


def read_fold_report(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"Fold report not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in FOLD_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"Fold report {path} is missing columns: {', '.join(missing)}")
    return frame


def summarize_folds(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample std of every metric per family; aborted (empty) rows are skipped."""
    rows = []
    for family, group in frame.groupby("family", sort=True):
        for metric in METRICS:
            values = pd.to_numeric(group[metric], errors="coerce").dropna()
            mean, std = mean_std(values.to_numpy(dtype=np.float64))
            rows.append({"family": family, "metric": metric, "mean": mean, "std": std})
    return pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))


def write_summary(reports: Iterable[ExperimentReport], path: str | Path) -> Path:
    path = Path(path)
    summarize_folds(fold_rows(reports)).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
    return path


def write_sweep(rows: Sequence[SweepRow], path: str | Path) -> Path:
    path = Path(path)
    records = [
        {
            "keep_fraction": r.keep_fraction,
            "removed_fraction": r.removed_fraction,
            "diffusion": r.diffusion,
            "mean_bal_acc": r.mean_bal_acc,
            "std_bal_acc": r.std_bal_acc,
            "aborted": r.aborted,
        }
        for r in rows
    ]
    pd.DataFrame(records, columns=list(SWEEP_COLUMNS)).to_csv(path, index=False, lineterminator="\n")
    return path


def write_scaling(result: ScalingResult, path: str | Path) -> Path:
    path = Path(path)
    records = []
    for family, entries in result.results.items():
        for size, fold in entries:
            records.append(
                {
                    "family": family,
                    "size": size,
                    **{name: _cell(getattr(fold, name)) for name in ("tp", "fp", "tn", "fn", *METRICS)},
                    "test_hash": result.test_hash,
                    "subset_hash": result.subset_hashes[size],
                    "error": _cell(fold.error),
                }
            )
    pd.DataFrame(records, columns=list(SCALING_COLUMNS)).to_csv(path, index=False, lineterminator="\n")
    return path
