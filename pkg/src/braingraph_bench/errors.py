"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to so `app.run` can translate
failures without a lookup table.
"""
from __future__ import annotations


class BenchmarkError(Exception):
    exit_code = 2


class ConfigurationError(BenchmarkError, ValueError):
    """Invalid parameters, grids, split budgets or experiment config."""


class DimensionError(BenchmarkError, ValueError):
    """Incompatible tensor shapes."""


class ContractError(BenchmarkError, ValueError):
    """A caller broke a documented precondition."""


class SchemaError(BenchmarkError, ValueError):
    """On-disk data does not match the expected layout."""


class DataError(BenchmarkError, ValueError):
    """On-disk data has invalid values (NaN, bad labels)."""


class IngestionError(BenchmarkError):
    """A referenced file could not be read."""


class TrainingError(BenchmarkError, RuntimeError):
    """A training run had to be aborted."""


class NonFiniteError(TrainingError):
    """An operation produced NaN or Inf."""


class MetricError(BenchmarkError, ValueError):
    pass


class SearchError(BenchmarkError, RuntimeError):
    pass


class ProtocolError(BenchmarkError, AssertionError):
    """Test indices leaked into a selection or training set."""


class UsageError(BenchmarkError):
    exit_code = 1
