from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold, train_test_split

from braingraph_bench.errors import ConfigurationError, DataError, IngestionError, SchemaError
from braingraph_bench.numerics import derive_seed, make_rng

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("subject_id", "label", "site", "path")
INNER_VAL_FRACTION = 0.15
SPECTRAL_RADIUS = 0.9
PLANTED_PAIR_FRACTION = 0.10
BURN_IN = 100
# autoregressive weight of every ROI on itself before rescaling
SELF_COUPLING = 0.5
# Matrices are written with enough digits to round-trip float64 exactly.
_CSV_FORMAT = "%.17g"


@dataclass(slots=True)
class Subject:
    subject_id: str
    label: int
    site: str
    timecourses: np.ndarray  # T timepoints x N rois

    @property
    def num_timepoints(self) -> int:
        return self.timecourses.shape[0]

    @property
    def num_rois(self) -> int:
        return self.timecourses.shape[1]


@dataclass(slots=True)
class TimeSeriesDataset:
    subjects: tuple[Subject, ...]
    num_rois: int
    source: str = ""
    seed: int | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=int)

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def subset(self, indices: Sequence[int]) -> "TimeSeriesDataset":
        return TimeSeriesDataset(
            subjects=tuple(self.subjects[int(i)] for i in indices),
            num_rois=self.num_rois,
            source=self.source,
            seed=self.seed,
            metadata=dict(self.metadata),
        )

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for subject in self.subjects:
            digest.update(f"{subject.subject_id}|{subject.label}|{subject.site}|".encode("utf-8"))
            digest.update(np.ascontiguousarray(subject.timecourses).tobytes())
        return digest.hexdigest()


@dataclass(slots=True)
class FoldSplit:
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(slots=True)
class SplitPlan:
    folds: list[FoldSplit]
    seed: int

    def __len__(self) -> int:
        return len(self.folds)


@dataclass(slots=True)
class SubsamplePlan:
    test: np.ndarray
    subsets: dict[int, np.ndarray]


def index_hash(indices: Sequence[int]) -> str:
    ordered = np.sort(np.asarray(indices, dtype=np.int64))
    return hashlib.sha256(ordered.tobytes()).hexdigest()


# --------------------------------------------------------------------------
# Ingestion
# --------------------------------------------------------------------------


def zscore(timecourses: np.ndarray) -> np.ndarray:
    """Per-ROI z-score over time; constant ROIs become all-zero columns."""
    centred = timecourses - timecourses.mean(axis=0, keepdims=True)
    std = centred.std(axis=0, keepdims=True)
    constant = std[0] <= 1e-12 * np.maximum(1.0, np.abs(timecourses).max(axis=0))
    safe = np.where(constant, 1.0, std)
    scored = centred / safe
    scored[:, constant] = 0.0
    return scored


def _read_series(path: Path, subject_id: str) -> np.ndarray:
    if not path.exists():
        raise IngestionError(f"Time-series file for subject {subject_id!r} not found: {path}")
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise SchemaError(f"Time-series file for subject {subject_id!r} is malformed: {exc}") from exc
    except OSError as exc:
        raise IngestionError(f"Cannot read time series for subject {subject_id!r}: {exc}") from exc
    if np.isnan(values).any():
        raise DataError(f"Time series for subject {subject_id!r} contains NaN values")
    if not np.isfinite(values).all():
        raise DataError(f"Time series for subject {subject_id!r} contains infinite values")
    return values


def load_dataset(manifest_path: str | Path) -> TimeSeriesDataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IngestionError(f"Manifest not found: {manifest_path}")

    manifest = pd.read_csv(manifest_path, dtype=str)
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise SchemaError(f"Manifest {manifest_path} is missing columns: {', '.join(missing)}")
    if manifest.empty:
        raise SchemaError(f"Manifest {manifest_path} lists no subjects")
    if manifest["subject_id"].duplicated().any():
        dupes = sorted(manifest.loc[manifest["subject_id"].duplicated(), "subject_id"])
        raise SchemaError(f"Duplicate subject ids in manifest: {', '.join(dupes)}")

    base_dir = manifest_path.parent
    subjects: list[Subject] = []
    num_rois: int | None = None
    for row in manifest.itertuples(index=False):
        subject_id = str(row.subject_id)
        try:
            label = int(row.label)
        except (TypeError, ValueError) as exc:
            raise DataError(f"Subject {subject_id!r} has a non-integer label {row.label!r}") from exc
        if label not in (0, 1):
            raise DataError(f"Subject {subject_id!r} has label {label}, expected 0 or 1")

        values = _read_series(base_dir / str(row.path), subject_id)
        if values.shape[0] < 2 or values.shape[1] < 2:
            raise SchemaError(
                f"Subject {subject_id!r} needs at least 2 timepoints and 2 ROIs, got {values.shape}"
            )
        if num_rois is None:
            num_rois = values.shape[1]
        elif values.shape[1] != num_rois:
            raise SchemaError(
                f"Subject {subject_id!r} has {values.shape[1]} ROIs, other subjects have {num_rois}"
            )

        constant = int(np.sum(values.std(axis=0) == 0))
        if constant:
            warnings.warn(
                f"Subject {subject_id!r} has {constant} constant ROI(s); they are loaded as zeros.",
                RuntimeWarning,
                stacklevel=2,
            )
        site = "" if pd.isna(row.site) else str(row.site)
        subjects.append(Subject(subject_id, label, site, zscore(values)))

    labels = {s.label for s in subjects}
    if labels != {0, 1}:
        raise SchemaError(f"Dataset {manifest_path} must contain both labels, found {sorted(labels)}")

    logger.info("Loaded %d subjects with %d ROIs from %s", len(subjects), num_rois, manifest_path)
    return TimeSeriesDataset(tuple(subjects), int(num_rois), source=str(manifest_path))


def write_matrix(path: Path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt=_CSV_FORMAT, newline="\n")


def write_dataset(
    dataset: TimeSeriesDataset,
    out_dir: str | Path,
    ground_truth: Mapping[int, np.ndarray] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> Path:
    """Write the manifest + per-subject CSV layout; returns the manifest path."""
    out_dir = Path(out_dir)
    series_dir = out_dir / "timeseries"
    series_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for subject in dataset.subjects:
        relative = Path("timeseries") / f"{subject.subject_id}.csv"
        write_matrix(out_dir / relative, subject.timecourses)
        rows.append(
            {"subject_id": subject.subject_id, "label": subject.label, "site": subject.site, "path": relative.as_posix()}
        )
    manifest_path = out_dir / "manifest.csv"
    pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS)).to_csv(manifest_path, index=False, lineterminator="\n")

    for label, matrix in (ground_truth or {}).items():
        write_matrix(out_dir / f"groundtruth_adjacency_class{label}.csv", matrix)
    if meta:
        pd.DataFrame({"key": list(meta.keys()), "value": [str(v) for v in meta.values()]}).to_csv(
            out_dir / "meta.csv", index=False, lineterminator="\n"
        )
    return manifest_path


def read_ground_truth(directory: str | Path) -> dict[int, np.ndarray]:
    """Class coupling matrices written next to a synthetic manifest."""
    directory = Path(directory)
    matrices: dict[int, np.ndarray] = {}
    for path in sorted(directory.glob("groundtruth_adjacency_class*.csv")):
        label = int(path.stem.removeprefix("groundtruth_adjacency_class"))
        matrices[label] = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if not matrices:
        raise IngestionError(f"No ground-truth adjacency files in {directory}")
    return matrices


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------


def _check_class_counts(labels: np.ndarray, k: int) -> None:
    counts = np.bincount(labels, minlength=2)
    if counts.min() < k:
        raise ConfigurationError(f"Each class needs at least {k} subjects, class counts are {counts.tolist()}")


def stratified_kfold(dataset: TimeSeriesDataset, k: int, seed: int) -> SplitPlan:
    """Outer stratified K folds, each with a stratified 85/15 inner train/val split."""
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    labels = dataset.labels
    _check_class_counts(labels, k)

    outer = StratifiedKFold(n_splits=k, shuffle=True, random_state=derive_seed(seed, "outer-folds"))
    folds: list[FoldSplit] = []
    for fold, (train_val, test) in enumerate(outer.split(np.zeros(len(labels)), labels)):
        train, val = inner_split(train_val, labels, derive_seed(seed, "inner-split", fold))
        folds.append(FoldSplit(fold, np.sort(train), np.sort(val), np.sort(test)))
    return SplitPlan(folds, seed)


def inner_split(indices: np.ndarray, labels: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified 85/15 train/validation split of `indices`."""
    indices = np.asarray(indices)
    if len(indices) < 2:
        raise ConfigurationError(f"inner split needs at least 2 subjects, got {len(indices)}")
    sub_labels = labels[indices]
    val_count = math.ceil(INNER_VAL_FRACTION * len(indices))
    # sklearn needs one slot per class on each side before it can stratify
    can_stratify = np.bincount(sub_labels, minlength=2).min() >= 2 and 2 <= val_count <= len(indices) - 2
    stratify = sub_labels if can_stratify else None
    train, val = train_test_split(
        indices, test_size=INNER_VAL_FRACTION, stratify=stratify, random_state=seed
    )
    return np.asarray(train), np.asarray(val)


def holdout_split(dataset: TimeSeriesDataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (pool, held-out) split used to keep model selection off the CV pool."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"holdout fraction must be in (0, 1), got {fraction}")
    labels = dataset.labels
    _check_class_counts(labels, 2)
    pool, held = train_test_split(
        np.arange(len(dataset)), test_size=fraction, stratify=labels, random_state=derive_seed(seed, "holdout")
    )
    return np.sort(pool), np.sort(held)


def _stratified_order(indices: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Interleave shuffled classes so every prefix keeps the class proportions."""
    pools = {c: list(rng.permutation(indices[labels[indices] == c])) for c in (0, 1)}
    totals = {c: len(p) for c, p in pools.items()}
    taken = {0: 0, 1: 0}
    order: list[int] = []
    for position in range(1, len(indices) + 1):
        # pick the class furthest below its proportional share of this prefix
        deficits = {
            c: position * totals[c] / len(indices) - taken[c] for c in (0, 1) if taken[c] < totals[c]
        }
        chosen = max(deficits, key=lambda c: (deficits[c], -c))
        order.append(int(pools[chosen][taken[chosen]]))
        taken[chosen] += 1
    return np.asarray(order, dtype=int)


def subsample_train(
    dataset: TimeSeriesDataset, sizes: Sequence[int], test_size: int, seed: int
) -> SubsamplePlan:
    """Fixed stratified test set plus nested, stratified training subsets."""
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise ConfigurationError("training sizes must be positive")
    if test_size < 2:
        raise ConfigurationError(f"test set needs one subject per class, got test_size={test_size}")
    if max(sizes) + test_size > len(dataset):
        raise ConfigurationError(
            f"Largest subset ({max(sizes)}) plus test set ({test_size}) exceeds {len(dataset)} subjects"
        )
    labels = dataset.labels
    _check_class_counts(labels, 2)
    pool, test = train_test_split(
        np.arange(len(dataset)), test_size=test_size, stratify=labels,
        random_state=derive_seed(seed, "scaling-test"),
    )
    order = _stratified_order(np.asarray(pool), labels, make_rng(seed, "scaling-order"))
    subsets = {size: np.sort(order[:size]) for size in sorted(set(sizes))}
    return SubsamplePlan(np.sort(np.asarray(test)), subsets)


# --------------------------------------------------------------------------
# Synthetic generation
# --------------------------------------------------------------------------


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def _symmetric_pairs(n: int, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.triu_indices(n, k=1)
    chosen = rng.choice(len(rows), size=count, replace=False)
    return rows[chosen], cols[chosen]


def _coupling_matrices(
    n: int, effect: float, density: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pairs = n * (n - 1) // 2
    base = SELF_COUPLING * np.eye(n)
    rows, cols = _symmetric_pairs(n, max(1, math.ceil(density * pairs)), rng)
    weights = rng.normal(0.0, 0.5 / math.sqrt(n), size=len(rows))
    base[rows, cols] = weights
    base[cols, rows] = weights

    planted = np.zeros((n, n))
    rows, cols = _symmetric_pairs(n, max(1, math.ceil(PLANTED_PAIR_FRACTION * pairs)), rng)
    planted[rows, cols] = 1.0 / math.sqrt(n)
    planted[cols, rows] = 1.0 / math.sqrt(n)
    return base, base + effect * planted, planted != 0


def _rescale(matrix: np.ndarray) -> np.ndarray:
    radius = spectral_radius(matrix)
    if radius <= 1e-12:
        raise ConfigurationError("Coupling matrix is zero; increase density")
    return SPECTRAL_RADIUS * matrix / radius


def _simulate_var(
    coupling: np.ndarray, timepoints: int, noise_std: float, rng: np.random.Generator
) -> np.ndarray:
    n = coupling.shape[0]
    noise = rng.normal(0.0, noise_std, size=(BURN_IN + timepoints, n))
    x = np.zeros(n)
    series = np.empty((timepoints, n))
    for step in range(BURN_IN + timepoints):
        x = coupling @ x + noise[step]
        if step >= BURN_IN:
            series[step - BURN_IN] = x
    return series


@dataclass(slots=True)
class SyntheticDataset:
    dataset: TimeSeriesDataset
    ground_truth: dict[int, np.ndarray]
    planted_pairs: np.ndarray  # boolean N x N mask of the class-1 extra coupling


def generate_synthetic(
    num_subjects: int,
    num_rois: int,
    timepoints: int,
    effect: float,
    noise_std: float = 1.0,
    density: float = 0.2,
    seed: int = 0,
    num_sites: int = 1,
) -> SyntheticDataset:
    """Labelled VAR(1) subjects whose class-1 coupling carries extra planted edges.

    Both class coupling matrices are rescaled to spectral radius 0.9 and
    returned as the ground-truth adjacencies.
    """
    if num_rois < 4:
        raise ConfigurationError(f"num_rois must be at least 4, got {num_rois}")
    if timepoints < 50:
        raise ConfigurationError(f"timepoints must be at least 50, got {timepoints}")
    if not 0.0 < density < 1.0:
        raise ConfigurationError(f"density must be in (0, 1), got {density}")
    if effect < 0.0:
        raise ConfigurationError(f"effect must be non-negative, got {effect}")
    if noise_std <= 0.0:
        raise ConfigurationError(f"noise_std must be positive, got {noise_std}")
    if num_subjects < 2:
        raise ConfigurationError(f"num_subjects must be at least 2, got {num_subjects}")
    if num_sites < 1:
        raise ConfigurationError(f"num_sites must be at least 1, got {num_sites}")

    base, shifted, planted = _coupling_matrices(num_rois, effect, density, make_rng(seed, "synthetic", "coupling"))
    couplings = {0: _rescale(base), 1: _rescale(shifted)}

    labels = np.zeros(num_subjects, dtype=int)
    labels[num_subjects // 2:] = 1
    labels = make_rng(seed, "synthetic", "labels").permutation(labels)

    subjects = []
    width = max(4, len(str(num_subjects)))
    for index, label in enumerate(labels):
        rng = make_rng(seed, "synthetic", "subject", index)
        series = _simulate_var(couplings[int(label)], timepoints, noise_std, rng)
        subjects.append(
            Subject(f"sub-{index:0{width}d}", int(label), f"site{index % num_sites}", zscore(series))
        )

    meta = {
        "num_subjects": num_subjects,
        "num_rois": num_rois,
        "timepoints": timepoints,
        "effect": effect,
        "noise_std": noise_std,
        "density": density,
        "seed": seed,
        "num_sites": num_sites,
        "spectral_radius": SPECTRAL_RADIUS,
        "burn_in": BURN_IN,
    }
    logger.info("Generated %d synthetic subjects (N=%d, T=%d, effect=%g)", num_subjects, num_rois, timepoints, effect)
    dataset = TimeSeriesDataset(tuple(subjects), num_rois, source="synthetic", seed=seed, metadata=meta)
    return SyntheticDataset(dataset, couplings, planted)
