"""Exception types shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data errors
exit 3, budget violations exit 4.
"""


class ConfigError(Exception):
    """Invalid run configuration, schema file, or parameter combination."""


class DataError(Exception):
    """Input data violates a schema or format contract.

    ``report`` optionally carries a list of row-indexed problem strings.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = list(report) if report else []


class BudgetError(Exception):
    """Privacy budget overspend or use of a sealed ledger."""
