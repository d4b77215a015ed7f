"""Output formatters for magnetrec."""

from magnetrec.formatters.report import (
    fit_table,
    gradcheck_table,
    metrics_table,
    print_table,
    profile_table,
)

__all__ = ["fit_table", "gradcheck_table", "metrics_table", "print_table", "profile_table"]
