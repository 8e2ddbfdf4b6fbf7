from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from braingraph_bench import __version__
from braingraph_bench.config import (
    JOBS_ENV,
    LOG_LEVEL_ENV,
    ExperimentConfig,
    default_output_dir,
    env_int,
    load_experiment_config,
    load_local_env_file,
    parse_scalar,
)
from braingraph_bench.datasets import (
    INNER_VAL_FRACTION,
    TimeSeriesDataset,
    generate_synthetic,
    holdout_split,
    inner_split,
    load_dataset,
    read_ground_truth,
    write_dataset,
)
from braingraph_bench.errors import BenchmarkError, TrainingError, UsageError
from braingraph_bench.experiments import (
    HyperGrid,
    SearchResult,
    compute_metrics,
    confusion_counts,
    grid_search,
    predict_labels,
    prepare_samples,
    read_fold_report,
    run_protocol,
    scaling_study,
    summarize_folds,
    threshold_sweep,
    train_model,
    write_aborted,
    write_fold_report,
    write_scaling,
    write_summary,
    write_sweep,
)
from braingraph_bench.graphs import (
    DiffusionConfig,
    build_dynamic_graph,
    build_static_graph,
    dump_graph,
    ground_truth_adjacency,
    permuted_adjacency,
)
from braingraph_bench.models import ALL_FAMILIES, ModelSpec, save_checkpoint
from braingraph_bench.numerics import derive_seed, make_rng
from braingraph_bench.plotting import Curve, emit_plot

logger = logging.getLogger(__name__)

FAILED_MARKER = ".failed"
RANGE_HELP = "start:stop:step (stop included when hit exactly) or a comma-separated list"


class BenchmarkArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting so `main` owns the exit code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def parse_range(text: str) -> list[float]:
    """Expand `start:stop:step` (inclusive of an exactly-hit stop) or `a,b,c`."""
    text = text.strip()
    try:
        if ":" not in text:
            values = [float(v) for v in text.split(",") if v.strip()]
            if not values:
                raise UsageError(f"empty range {text!r}")
            return values
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise UsageError(f"invalid range {text!r}; expected {RANGE_HELP}") from exc
    if step <= 0 or stop < start:
        raise UsageError(f"invalid range {text!r}: step must be positive and stop >= start")
    count = math.floor((stop - start) / step + 1e-9) + 1
    return [round(start + i * step, 12) for i in range(count)]


def _parse_assignments(items: Sequence[str] | None, *, multi: bool) -> dict[str, Any]:
    parsed: dict[str, Any] = {}
    for item in items or []:
        name, sep, raw = item.partition("=")
        if not sep or not name.strip():
            raise UsageError(f"expected NAME=VALUE, got {item!r}")
        name = name.strip().lower()
        parsed[name] = [parse_scalar(v) for v in raw.split(",")] if multi else parse_scalar(raw)
    return parsed


def _common_parser() -> argparse.ArgumentParser:
    common = BenchmarkArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master seed (defaults to SEED in --config or 0)")
    common.add_argument(
        "--out", type=Path, default=None, help="Output directory (defaults to OUTPUT_DIR in --config or BRAINGRAPH_OUT)"
    )
    common.add_argument("--config", type=Path, default=None, help="Experiment config file (KEY=value lines)")
    common.add_argument(
        "--jobs",
        type=int,
        default=None,
        help="Parallel workers for grid points and folds (defaults to JOBS in --config, BRAINGRAPH_JOBS or 1)",
    )
    return common


def _add_model_flags(parser: argparse.ArgumentParser, *, grid: bool) -> None:
    parser.add_argument("--dataset", type=Path, default=None, help="Path to manifest.csv")
    parser.add_argument("--family", choices=ALL_FAMILIES, default=None, help="Model family")
    parser.add_argument(
        "--set", dest="fixed", action="append", metavar="NAME=VALUE", help="Fix a hyperparameter (repeatable)"
    )
    if grid:
        parser.add_argument(
            "--grid", action="append", metavar="NAME=V1,V2", help="Replace one axis of the default grid (repeatable)"
        )


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = BenchmarkArgumentParser(
        prog="braingraph-bench",
        description="Benchmark graph neural networks on functional brain connectivity",
        epilog=f"Range flags accept {RANGE_HELP}.",
    )
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    synth = verbs.add_parser("synth", parents=[common], help="Generate a synthetic VAR dataset")
    synth.add_argument("--subjects", type=int, default=400)
    synth.add_argument("--rois", type=int, default=50)
    synth.add_argument("--timepoints", type=int, default=200)
    synth.add_argument("--effect", type=float, default=0.5)
    synth.add_argument("--noise-std", type=float, default=1.0)
    synth.add_argument("--density", type=float, default=0.2)
    synth.add_argument("--sites", type=int, default=1)
    synth.set_defaults(handler=_run_synth)

    fc = verbs.add_parser("fc", parents=[common], help="Build and dump per-subject graphs")
    fc.add_argument("--dataset", type=Path, default=None, help="Path to manifest.csv")
    fc.add_argument("--kind", choices=("static", "dynamic"), default="static")
    fc.add_argument("--keep-fraction", type=float, default=0.25)
    fc.add_argument("--diffusion", choices=("none", "heat", "ppr"), default="none")
    fc.add_argument("--by-magnitude", action="store_true")
    fc.set_defaults(handler=_run_fc)

    train = verbs.add_parser("train", parents=[common], help="Train one model on an 85/15 split")
    _add_model_flags(train, grid=False)
    train.set_defaults(handler=_run_train)

    search = verbs.add_parser("search", parents=[common], help="Grid search on the held-out dev slice")
    _add_model_flags(search, grid=True)
    search.set_defaults(handler=_run_search)

    cv = verbs.add_parser("cv", parents=[common], help="Grid search then outer k-fold cross-validation")
    _add_model_flags(cv, grid=True)
    cv.add_argument("--folds", type=int, default=None)
    cv.add_argument("--no-search", dest="search", action="store_false", default=None)
    cv.add_argument("--reuse-val-in-cv", action="store_true", default=None)
    cv.add_argument(
        "--adjacency",
        choices=("fc", "groundtruth", "permuted"),
        default="fc",
        help="Thresholded FC edges, the synthetic ground truth, or a degree-matched null of it",
    )
    cv.set_defaults(handler=_run_cv)

    scale = verbs.add_parser("scale", parents=[common], help="Accuracy against training-set size")
    _add_model_flags(scale, grid=False)
    scale.add_argument("--families", default="gcn,mlp,cnn1d,svm_rbf", help="Comma-separated families")
    scale.add_argument("--sizes", default="100,200,400,800,1600", help=f"Training sizes: {RANGE_HELP}")
    scale.add_argument("--test-size", type=int, default=200)
    scale.set_defaults(handler=_run_scale)

    sweep = verbs.add_parser("sweep", parents=[common], help="Keep-fraction sweep with and without diffusion")
    _add_model_flags(sweep, grid=False)
    sweep.add_argument("--fractions", default="0.05:0.50:0.05", help=f"Keep fractions: {RANGE_HELP}")
    sweep.add_argument("--diffusion", choices=("none", "heat", "ppr", "both"), default="both")
    sweep.add_argument("--folds", type=int, default=None)
    sweep.set_defaults(handler=_run_sweep)

    report = verbs.add_parser("report", parents=[common], help="Recompute report_summary.csv from a fold report")
    report.add_argument("--folds-csv", type=Path, default=None, help="Defaults to <out>/report_folds.csv")
    report.set_defaults(handler=_run_report)
    return parser


# --------------------------------------------------------------------------
# Run context
# --------------------------------------------------------------------------


@dataclass(slots=True)
class RunContext:
    args: argparse.Namespace
    config: ExperimentConfig
    seed: int
    out: Path
    jobs: int
    meta: dict[str, Any] = field(default_factory=dict)
    _dataset: TimeSeriesDataset | None = None

    @property
    def dataset_path(self) -> Path:
        path = getattr(self.args, "dataset", None) or self.config.dataset
        if path is None:
            raise UsageError("--dataset (or DATASET in --config) is required")
        return Path(path)

    def dataset(self) -> TimeSeriesDataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.dataset_path)
            self.meta["dataset_hash"] = self._dataset.content_hash()
        return self._dataset

    @property
    def family(self) -> str:
        family = getattr(self.args, "family", None) or self.config.family
        if family is None:
            raise UsageError("--family (or FAMILY in --config) is required")
        if family not in ALL_FAMILIES:
            raise UsageError(f"unknown family {family!r}; choose from {', '.join(ALL_FAMILIES)}")
        return family

    @property
    def fixed(self) -> dict[str, Any]:
        return {**self.config.fixed, **_parse_assignments(getattr(self.args, "fixed", None), multi=False)}

    def grid(self) -> HyperGrid:
        overrides = {**self.config.grid, **_parse_assignments(getattr(self.args, "grid", None), multi=True)}
        return HyperGrid.default(self.family).with_overrides(overrides).with_fixed(self.fixed)

    def spec(self, family: str | None = None) -> ModelSpec:
        return ModelSpec.build(family=family or self.family, **self.fixed)

    def folds(self) -> int:
        return getattr(self.args, "folds", None) or self.config.folds


def _resolve_context(args: argparse.Namespace) -> RunContext:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    out = args.out or config.output_dir or default_output_dir()
    if out is None:
        raise UsageError("--out (or OUTPUT_DIR in --config, or BRAINGRAPH_OUT) is required")
    jobs = args.jobs or config.jobs or env_int(JOBS_ENV, 1)
    if jobs < 1:
        raise UsageError(f"--jobs must be at least 1, got {jobs}")
    seed = config.seed if args.seed is None else args.seed
    return RunContext(args, config, seed, Path(out), jobs)


def _write_key_values(path: Path, values: dict[str, Any]) -> None:
    rows = [(key, "" if value is None else str(value)) for key, value in values.items()]
    pd.DataFrame(rows, columns=["key", "value"]).to_csv(path, index=False, lineterminator="\n")


def _write_run_meta(ctx: RunContext, status: str) -> None:
    flags = {f"flag.{k}": v for k, v in sorted(vars(ctx.args).items()) if k != "handler"}
    meta = {
        "verb": ctx.args.verb,
        "status": status,
        "version": __version__,
        "seed": ctx.seed,
        "jobs": ctx.jobs,
        "config": ctx.args.config or "",
        **flags,
        **ctx.meta,
    }
    _write_key_values(ctx.out / "run_meta.csv", meta)


# --------------------------------------------------------------------------
# Verbs
# --------------------------------------------------------------------------


def _run_synth(ctx: RunContext) -> None:
    a = ctx.args
    synthetic = generate_synthetic(
        a.subjects, a.rois, a.timepoints, a.effect,
        noise_std=a.noise_std, density=a.density, seed=ctx.seed, num_sites=a.sites,
    )
    manifest = write_dataset(synthetic.dataset, ctx.out, synthetic.ground_truth, synthetic.dataset.metadata)
    ctx.meta["dataset_hash"] = synthetic.dataset.content_hash()
    print(f"Wrote {len(synthetic.dataset)} subjects to {manifest}")


def _run_fc(ctx: RunContext) -> None:
    a = ctx.args
    dataset = ctx.dataset()
    diffusion = DiffusionConfig.parse(a.diffusion)
    graph_dir = ctx.out / "graphs"
    edges = []
    for subject in dataset.subjects:
        if a.kind == "static":
            graph = build_static_graph(subject, a.keep_fraction, diffusion, by_magnitude=a.by_magnitude)
        else:
            graph = build_dynamic_graph(subject, a.keep_fraction, diffusion, by_magnitude=a.by_magnitude)
        dump_graph(graph, graph_dir)
        edges.append(graph.raw_adjacency.edge_count())
    print(f"Wrote {len(edges)} {a.kind} graphs to {graph_dir} (mean {np.mean(edges):.1f} edges before diffusion)")


def _run_train(ctx: RunContext) -> None:
    dataset = ctx.dataset()
    spec = ctx.spec()
    train_idx, val_idx = inner_split(np.arange(len(dataset)), dataset.labels, derive_seed(ctx.seed, "train-split"))
    train = prepare_samples(dataset, train_idx, spec)
    val = prepare_samples(dataset, val_idx, spec)
    model = train_model(spec, train, val, ctx.seed)

    save_checkpoint(model, ctx.out / "model")
    pd.DataFrame(
        [(r.epoch, r.train_loss, r.val_loss) for r in model.history], columns=["epoch", "train_loss", "val_loss"]
    ).to_csv(ctx.out / "history.csv", index=False, lineterminator="\n")
    counts = confusion_counts([s.label for s in val], predict_labels(model, val))
    bal_acc, _, _ = compute_metrics(*counts)
    print(f"Trained {spec.family}: best epoch {model.best_epoch}, val loss {model.best_val_loss:.4f}")
    print(f"Validation balanced accuracy: {bal_acc:.3f}")


def _run_search(ctx: RunContext) -> None:
    dataset = ctx.dataset()
    _, dev = holdout_split(dataset, INNER_VAL_FRACTION, ctx.seed)
    dev_train, dev_val = inner_split(dev, dataset.labels, derive_seed(ctx.seed, "dev-split"))
    result = grid_search(ctx.family, ctx.grid(), dataset, dev_train, dev_val, ctx.seed, jobs=ctx.jobs)
    _write_search(ctx.out, result)
    print(f"Best {ctx.family} configuration: {result.best.model_dump(exclude_defaults=True, exclude={'family'})}")


def _write_search(out: Path, result: SearchResult) -> None:
    rows = [
        {
            "hparams": json.dumps(p.hparams, sort_keys=True),
            "val_loss": "" if p.error else p.val_loss,
            "best_epoch": "" if p.best_epoch is None else p.best_epoch,
            "error": p.error or "",
        }
        for p in result.points
    ]
    pd.DataFrame(rows, columns=["hparams", "val_loss", "best_epoch", "error"]).to_csv(
        out / "search_results.csv", index=False, lineterminator="\n"
    )
    _write_key_values(out / "best_spec.csv", result.best.model_dump())


def _fixed_adjacency(ctx: RunContext):
    choice = ctx.args.adjacency
    if choice == "fc":
        return None
    truth = ground_truth_adjacency(read_ground_truth(ctx.dataset_path.parent))
    if choice == "groundtruth":
        return truth
    return permuted_adjacency(truth, make_rng(ctx.seed, "null-adjacency"))


def _run_cv(ctx: RunContext) -> None:
    a = ctx.args
    dataset = ctx.dataset()
    search = ctx.config.search if a.search is None else a.search
    reuse = ctx.config.reuse_val_in_cv if a.reuse_val_in_cv is None else a.reuse_val_in_cv
    result = run_protocol(
        ctx.family,
        dataset,
        ctx.grid(),
        ctx.seed,
        folds=ctx.folds(),
        search=search,
        reuse_val_in_cv=reuse,
        fixed_adjacency=_fixed_adjacency(ctx),
        jobs=ctx.jobs,
        experiment=f"cv-{a.adjacency}",
    )
    if result.search is not None:
        _write_search(ctx.out, result.search)
    report = result.report
    write_fold_report([report], ctx.out / "report_folds.csv")
    write_aborted([report], ctx.out / "report_aborted.csv")
    write_summary([report], ctx.out / "report_summary.csv")
    for metric, (mean, std) in report.summary().items():
        print(f"{ctx.family} {metric}: {mean:.3f} +- {std:.3f}")
    if report.aborted:
        print(f"{len(report.aborted)} fold(s) aborted; see report_aborted.csv")


def _run_scale(ctx: RunContext) -> None:
    a = ctx.args
    dataset = ctx.dataset()
    families = [f.strip() for f in a.families.split(",") if f.strip()]
    unknown = [f for f in families if f not in ALL_FAMILIES]
    if unknown or not families:
        raise UsageError(f"unknown families: {', '.join(unknown) or '(none given)'}")
    sizes = [int(round(s)) for s in parse_range(a.sizes)]
    result = scaling_study(
        [ctx.spec(f) for f in families], dataset, sizes, a.test_size, ctx.seed, jobs=ctx.jobs
    )
    write_scaling(result, ctx.out / "scaling.csv")
    curves = []
    for family in families:
        xs, ys = result.curve(family)
        if xs:
            curves.append(Curve(family, xs, ys))
    if not curves:
        raise TrainingError("every scaling run aborted; see scaling.csv")
    emit_plot(ctx.out / "scaling.svg", curves, "training subjects", "balanced accuracy", "Scaling")
    ctx.meta["test_hash"] = result.test_hash
    print(f"Scaling study over sizes {sizes} written to {ctx.out / 'scaling.csv'}")


def _run_sweep(ctx: RunContext) -> None:
    a = ctx.args
    dataset = ctx.dataset()
    fractions = parse_range(a.fractions)
    arms = ("none", "heat") if a.diffusion == "both" else (a.diffusion,)
    family = getattr(a, "family", None) or ctx.config.family or "gcn"
    rows = threshold_sweep(ctx.spec(family), dataset, fractions, arms, ctx.seed, folds=ctx.folds(), jobs=ctx.jobs)
    write_sweep(rows, ctx.out / "sweep.csv")
    curves = []
    for arm in arms:
        arm_rows = [r for r in rows if r.diffusion == arm and np.isfinite(r.mean_bal_acc)]
        if not arm_rows:
            continue
        curves.append(
            Curve(
                f"diffusion={arm}",
                [r.keep_fraction for r in arm_rows],
                [r.mean_bal_acc for r in arm_rows],
                [r.std_bal_acc for r in arm_rows],
            )
        )
    if not curves:
        raise TrainingError("every sweep fold aborted; see sweep.csv")
    emit_plot(ctx.out / "sweep.svg", curves, "keep fraction", "balanced accuracy", f"{family} threshold sweep")
    print(f"Sweep over {len(fractions)} fractions x {len(arms)} arm(s) written to {ctx.out / 'sweep.csv'}")


def _run_report(ctx: RunContext) -> None:
    source = ctx.args.folds_csv or ctx.out / "report_folds.csv"
    summary = summarize_folds(read_fold_report(source))
    summary.to_csv(ctx.out / "report_summary.csv", index=False, lineterminator="\n", float_format="%.17g")
    for row in summary.itertuples(index=False):
        print(f"{row.family} {row.metric}: {row.mean:.3f} +- {row.std:.3f}")


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _configure_logging() -> None:
    name = (os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    level = logging.getLevelName(name)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def run(argv: Sequence[str] | None = None) -> int:
    """Execute one verb; 0 on success, 1 on usage errors, 2 on runtime or data errors."""
    try:
        args = build_parser().parse_args(argv)
        ctx = _resolve_context(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except BenchmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    handler: Callable[[RunContext], None] = args.handler
    created = not ctx.out.exists()
    try:
        ctx.out.mkdir(parents=True, exist_ok=True)
        handler(ctx)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if created and ctx.out.is_dir() and not any(ctx.out.iterdir()):
            ctx.out.rmdir()
        return exc.exit_code
    except (BenchmarkError, ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.verb, exc)
        print(f"error: {exc}", file=sys.stderr)
        if ctx.out.is_dir():
            (ctx.out / FAILED_MARKER).write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
            _write_run_meta(ctx, "failed")
        return getattr(exc, "exit_code", 2)
    _write_run_meta(ctx, "ok")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    load_local_env_file()
    _configure_logging()
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
