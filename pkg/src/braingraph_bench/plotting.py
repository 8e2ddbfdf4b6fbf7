"""Curve plots (scaling and threshold sweeps) rendered as deterministic SVG."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

from braingraph_bench.errors import UsageError  # noqa: E402

_SVG_RC = {
    "svg.hashsalt": "braingraph-bench",
    "svg.fonttype": "none",
    "path.simplify": False,
}


@dataclass(slots=True)
class Curve:
    name: str
    x: Sequence[float]
    y: Sequence[float]
    err: Sequence[float] | None = None


def _check(curves: Sequence[Curve]) -> None:
    if not curves:
        raise UsageError("emit_plot needs at least one series")
    for curve in curves:
        if len(curve.x) == 0:
            raise UsageError(f"series {curve.name!r} is empty")
        if len(curve.x) != len(curve.y):
            raise UsageError(f"series {curve.name!r} has {len(curve.x)} x values and {len(curve.y)} y values")
        if curve.err is not None and len(curve.err) != len(curve.y):
            raise UsageError(f"series {curve.name!r} has mismatched error bars")


def emit_plot(
    path: str | Path,
    curves: Sequence[Curve],
    x_label: str,
    y_label: str,
    title: str | None = None,
) -> Path:
    """One line per series with optional error whiskers and a legend.

    matplotlib's SVG backend writes each line as a `<path>` (never a
    `<polyline>`) inside the group with id `series-<i>`; its vertices are the
    M/L commands of that path. Whiskers go to groups `whiskers-<i>`.
    """
    _check(curves)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.add_subplot()
        for index, curve in enumerate(curves):
            (line,) = ax.plot(curve.x, curve.y, marker="o", markersize=3, label=curve.name)
            line.set_gid(f"series-{index}")
            if curve.err is not None:
                whiskers = ax.errorbar(curve.x, curve.y, yerr=curve.err, fmt="none", ecolor=line.get_color(), capsize=3)
                for collection in whiskers.lines[2]:
                    collection.set_gid(f"whiskers-{index}")
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path
