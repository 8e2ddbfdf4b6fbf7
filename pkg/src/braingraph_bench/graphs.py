"""Functional-connectivity graphs: correlation, sparsification, diffusion, assembly."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from braingraph_bench.datasets import Subject, write_matrix
from braingraph_bench.errors import ConfigurationError, ContractError

GraphKind = Literal["static", "dynamic", "dynamic_adaptive"]
DiffusionScheme = Literal["none", "heat", "ppr"]
Transition = Literal["sym", "rw"]


@dataclass(slots=True)
class FCMatrix:
    values: np.ndarray

    @property
    def num_rois(self) -> int:
        return self.values.shape[0]


@dataclass(slots=True)
class Adjacency:
    values: np.ndarray
    normalized: bool = False

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    def edge_count(self) -> int:
        """Undirected edges with non-zero weight, self-loops excluded."""
        off = self.values[~np.eye(self.num_nodes, dtype=bool)]
        return int(np.count_nonzero(off) // 2)


@dataclass(slots=True)
class BrainGraph:
    node_features: np.ndarray
    label: int
    kind: GraphKind
    adjacency: Adjacency | None = None
    raw_adjacency: Adjacency | None = None
    subject_id: str = ""

    def __post_init__(self) -> None:
        if self.kind == "dynamic_adaptive":
            if self.adjacency is not None:
                raise ContractError("adaptive graphs learn their adjacency and must not carry one")
        elif self.adjacency is None:
            raise ContractError(f"{self.kind} graphs need an adjacency")
        elif self.adjacency.num_nodes != self.node_features.shape[0]:
            raise ContractError(
                f"adjacency has {self.adjacency.num_nodes} nodes, features have {self.node_features.shape[0]} rows"
            )

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]


@dataclass(frozen=True, slots=True)
class DiffusionConfig:
    scheme: DiffusionScheme = "none"
    t: float = 1.0
    alpha: float = 0.15
    transition: Transition = "sym"
    order: int = 2
    post_sparsify_keep: float | None = None

    def __post_init__(self) -> None:
        if self.scheme not in ("none", "heat", "ppr"):
            raise ConfigurationError(f"unknown diffusion scheme {self.scheme!r}")
        if self.transition not in ("sym", "rw"):
            raise ConfigurationError(f"unknown transition matrix {self.transition!r}")
        if self.scheme == "heat" and not self.t > 0:
            raise ConfigurationError(f"heat kernel needs t > 0, got {self.t}")
        # alpha = 1 is the degenerate S = I case
        if self.scheme == "ppr" and not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"ppr needs 0 < alpha <= 1, got {self.alpha}")
        if self.order < 1:
            raise ConfigurationError(f"truncation order K must be >= 1, got {self.order}")
        if self.post_sparsify_keep is not None and not 0.0 < self.post_sparsify_keep <= 1.0:
            raise ConfigurationError(f"post_sparsify_keep must be in (0, 1], got {self.post_sparsify_keep}")

    @classmethod
    def heat_default(cls) -> "DiffusionConfig":
        return cls(scheme="heat", t=1.0, transition="sym", order=2)

    @classmethod
    def parse(cls, name: str) -> "DiffusionConfig":
        if name == "heat":
            return cls.heat_default()
        if name == "ppr":
            return cls(scheme="ppr")
        if name == "none":
            return cls()
        raise ConfigurationError(f"unknown diffusion scheme {name!r}")

    def coefficients(self) -> np.ndarray:
        ks = np.arange(self.order + 1)
        if self.scheme == "heat":
            return np.array([math.exp(-self.t) * self.t**k / math.factorial(k) for k in ks])
        if self.scheme == "ppr":
            return self.alpha * (1.0 - self.alpha) ** ks
        raise ConfigurationError("the 'none' scheme has no coefficients")


def pearson_fc(timecourses: np.ndarray) -> FCMatrix:
    timecourses = np.asarray(timecourses, dtype=np.float64)
    if timecourses.ndim != 2 or timecourses.shape[0] < 2:
        raise ContractError(f"pearson_fc needs at least 2 timepoints, got shape {timecourses.shape}")
    centred = timecourses - timecourses.mean(axis=0, keepdims=True)
    norms = np.sqrt(np.sum(centred * centred, axis=0))
    constant = norms <= 1e-12
    safe = np.where(constant, 1.0, norms)
    r = (centred.T @ centred) / np.outer(safe, safe)
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return FCMatrix(r)


def lower_triangle(fc: FCMatrix | np.ndarray) -> np.ndarray:
    """Flattened strictly lower triangle, length N(N-1)/2."""
    values = fc.values if isinstance(fc, FCMatrix) else np.asarray(fc)
    rows, cols = np.tril_indices(values.shape[0], k=-1)
    return values[rows, cols].copy()


def _kept_pairs(count_pairs: int, keep_fraction: float) -> int:
    # round before ceil so 0.5 * 6 style products do not pick up float noise
    return min(count_pairs, math.ceil(round(keep_fraction * count_pairs, 9)))


def proportional_threshold(
    fc: FCMatrix | np.ndarray, keep_fraction: float, by_magnitude: bool = False
) -> Adjacency:
    """Keep the strongest `keep_fraction` of off-diagonal pairs.

    Pairs are ranked by signed value (or |value| with `by_magnitude`),
    ties broken by (i, j) order. Retained negative weights are clamped to 0.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigurationError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    values = fc.values if isinstance(fc, FCMatrix) else np.asarray(fc, dtype=np.float64)
    n = values.shape[0]
    rows, cols = np.triu_indices(n, k=1)
    pair_values = values[rows, cols]
    scores = np.abs(pair_values) if by_magnitude else pair_values
    ranked = np.argsort(-scores, kind="stable")[: _kept_pairs(len(pair_values), keep_fraction)]

    kept = np.maximum(pair_values[ranked], 0.0)
    if np.any(pair_values[ranked] < 0):
        warnings.warn(
            "Negative correlations reached by proportional thresholding were clamped to 0.",
            RuntimeWarning,
            stacklevel=2,
        )
    adjacency = np.zeros((n, n))
    adjacency[rows[ranked], cols[ranked]] = kept
    adjacency[cols[ranked], rows[ranked]] = kept
    return Adjacency(adjacency, normalized=False)


def _with_self_loops(raw: Adjacency) -> tuple[np.ndarray, np.ndarray]:
    a_hat = raw.values + np.eye(raw.num_nodes)
    return a_hat, a_hat.sum(axis=1)


def normalize_adjacency(raw: Adjacency) -> Adjacency:
    """D^-1/2 (A + I) D^-1/2."""
    a_hat, degree = _with_self_loops(raw)
    inv_sqrt = 1.0 / np.sqrt(degree)
    normalized = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    return Adjacency((normalized + normalized.T) / 2.0, normalized=True)


def gdc_transform(raw: Adjacency, cfg: DiffusionConfig) -> Adjacency:
    """Truncated graph diffusion S = sum_{k=0..K} theta_k T^k of the self-looped graph.

    With `post_sparsify_keep`, off-diagonal pairs are ranked on (S + S^T) / 2,
    so both directions of an rw transition count, and the strongest fraction
    is kept. The diagonal (self-loop mass) is never sparsified.
    """
    if cfg.scheme == "none":
        return normalize_adjacency(raw)

    a_hat, degree = _with_self_loops(raw)
    if cfg.transition == "sym":
        inv_sqrt = 1.0 / np.sqrt(degree)
        transition = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    else:
        transition = a_hat / degree[None, :]

    n = raw.num_nodes
    diffusion = np.zeros((n, n))
    power = np.eye(n)
    for theta in cfg.coefficients():
        diffusion += theta * power
        power = power @ transition

    if cfg.post_sparsify_keep is not None:
        diagonal = np.diag(diffusion).copy()
        diffusion = proportional_threshold((diffusion + diffusion.T) / 2.0, cfg.post_sparsify_keep).values
        np.fill_diagonal(diffusion, diagonal)
    return Adjacency(diffusion, normalized=True)


def ground_truth_adjacency(ground_truth: dict[int, np.ndarray]) -> Adjacency:
    """Label-free raw adjacency: mean coupling magnitude over classes, symmetrised."""
    if not ground_truth:
        raise ConfigurationError("ground truth needs at least one class coupling matrix")
    magnitude = np.mean([np.abs(m) for m in ground_truth.values()], axis=0)
    magnitude = (magnitude + magnitude.T) / 2.0
    np.fill_diagonal(magnitude, 0.0)
    return Adjacency(magnitude, normalized=False)


def permuted_adjacency(raw: Adjacency, rng: np.random.Generator) -> Adjacency:
    """Random node relabelling: same degree sequence and weights, unrelated structure."""
    order = rng.permutation(raw.num_nodes)
    return Adjacency(raw.values[np.ix_(order, order)].copy(), normalized=raw.normalized)


def build_static_graph(
    subject: Subject,
    keep_fraction: float,
    diffusion: DiffusionConfig | None = None,
    *,
    by_magnitude: bool = False,
    raw_override: Adjacency | None = None,
) -> BrainGraph:
    diffusion = diffusion or DiffusionConfig()
    fc = pearson_fc(subject.timecourses)
    features = fc.values.copy()
    np.fill_diagonal(features, 0.0)
    raw = raw_override if raw_override is not None else proportional_threshold(fc, keep_fraction, by_magnitude)
    return BrainGraph(
        node_features=features,
        label=subject.label,
        kind="static",
        adjacency=gdc_transform(raw, diffusion),
        raw_adjacency=raw,
        subject_id=subject.subject_id,
    )


def build_dynamic_graph(
    subject: Subject,
    keep_fraction: float | None,
    diffusion: DiffusionConfig | None = None,
    *,
    adaptive: bool = False,
    by_magnitude: bool = False,
    raw_override: Adjacency | None = None,
) -> BrainGraph:
    features = np.ascontiguousarray(subject.timecourses.T)
    if adaptive:
        return BrainGraph(features, subject.label, "dynamic_adaptive", subject_id=subject.subject_id)
    if keep_fraction is None and raw_override is None:
        raise ConfigurationError("dynamic graphs need a keep_fraction unless they are adaptive")
    diffusion = diffusion or DiffusionConfig()
    if raw_override is not None:
        raw = raw_override
    else:
        raw = proportional_threshold(pearson_fc(subject.timecourses), keep_fraction, by_magnitude)
    return BrainGraph(
        node_features=features,
        label=subject.label,
        kind="dynamic",
        adjacency=gdc_transform(raw, diffusion),
        raw_adjacency=raw,
        subject_id=subject.subject_id,
    )


def dump_graph(graph: BrainGraph, out_dir: str | Path) -> tuple[Path | None, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features_path = out_dir / f"features_{graph.subject_id}.csv"
    write_matrix(features_path, graph.node_features)
    if graph.adjacency is None:
        return None, features_path
    graph_path = out_dir / f"graph_{graph.subject_id}.csv"
    write_matrix(graph_path, graph.adjacency.values)
    return graph_path, features_path
