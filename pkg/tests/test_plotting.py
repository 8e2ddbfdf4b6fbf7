import re
import tempfile
import unittest
from pathlib import Path

from braingraph_bench.errors import UsageError
from braingraph_bench.plotting import Curve, emit_plot


def _series_vertices(svg: str, index: int) -> int:
    match = re.search(rf'<g id="series-{index}">\s*<path\b[^>]*?\sd="([^"]*)"', svg)
    if match is None:
        raise AssertionError(f"series-{index} group not found")
    return len(re.findall(r"[ML]", match.group(1)))


class EmitPlotTests(unittest.TestCase):
    def test_one_group_per_series(self) -> None:
        xs = list(range(10))
        curves = [Curve("gcn", xs, [0.5 + 0.01 * x for x in xs]), Curve("mlp", xs, [0.6] * 10)]
        with tempfile.TemporaryDirectory() as tmpdir:
            svg = emit_plot(Path(tmpdir) / "curves.svg", curves, "size", "bal_acc").read_text(encoding="utf-8")
        self.assertEqual(set(re.findall(r'id="(series-\d+)"', svg)), {"series-0", "series-1"})
        self.assertEqual(_series_vertices(svg, 0), 10)
        self.assertEqual(_series_vertices(svg, 1), 10)

    def test_two_point_series_draws_one_line(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            svg = emit_plot(Path(tmpdir) / "pair.svg", [Curve("gat", [1, 2], [0.5, 0.7])], "x", "y").read_text(
                encoding="utf-8"
            )
        self.assertEqual(set(re.findall(r'id="(series-\d+)"', svg)), {"series-0"})
        self.assertEqual(_series_vertices(svg, 0), 2)

    def test_error_bars_get_their_own_group(self) -> None:
        curve = Curve("heat", [0.1, 0.2, 0.3], [0.6, 0.65, 0.7], [0.02, 0.03, 0.01])
        with tempfile.TemporaryDirectory() as tmpdir:
            svg = emit_plot(Path(tmpdir) / "sweep.svg", [curve], "keep", "bal_acc", "sweep").read_text(encoding="utf-8")
        self.assertIn('id="whiskers-0"', svg)
        self.assertEqual(_series_vertices(svg, 0), 3)

    def test_output_is_byte_identical_across_runs(self) -> None:
        curve = Curve("svm_rbf", [100, 200, 400], [0.55, 0.6, 0.62])
        with tempfile.TemporaryDirectory() as tmpdir:
            first = emit_plot(Path(tmpdir) / "a.svg", [curve], "size", "bal_acc").read_bytes()
            second = emit_plot(Path(tmpdir) / "b.svg", [curve], "size", "bal_acc").read_bytes()
        self.assertEqual(first, second)

    def test_invalid_series(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            target = Path(tmpdir) / "bad.svg"
            with self.assertRaises(UsageError):
                emit_plot(target, [], "x", "y")
            with self.assertRaises(UsageError):
                emit_plot(target, [Curve("empty", [], [])], "x", "y")
            with self.assertRaises(UsageError):
                emit_plot(target, [Curve("short", [1, 2], [0.5])], "x", "y")
            self.assertFalse(target.exists())


if __name__ == "__main__":
    unittest.main()
