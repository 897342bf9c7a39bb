"""
This module contains console table loggers.

Remarks:

- Tables are rendered with `tabulate` in the ``grid`` format and emitted through the package logger
- Every logger accepts a `pandas` frame; the index becomes the first column

"""

import logging

import pandas as pd
from tabulate import tabulate


class TableLogger:
    """
    Renders result frames as grid tables.

    To add a new table: write a method that shapes the frame and calls :meth:`print_table`.
    """

    def __init__(self, logger=None, floatfmt=".4f"):
        self.logger = logger or logging.getLogger("funcspace")
        self.floatfmt = floatfmt

    def render(self, frame: pd.DataFrame, floatfmt=None, showindex=True):
        return tabulate(
            frame,
            headers="keys",
            floatfmt=floatfmt or self.floatfmt,
            tablefmt="grid",
            showindex=showindex,
        )

    def print_table(self, frame: pd.DataFrame, title=None, floatfmt=None, showindex=True):
        table = self.render(frame, floatfmt=floatfmt, showindex=showindex)
        if title:
            table = f"{title}\n{table}"
        self.logger.info("\n%s", table)
        return table

    def print_mpe_grid(self, grid: pd.DataFrame, best=None):
        """MPE grid in percent, decoders as rows and encoder depths as columns."""
        percent = grid * 100.0
        if best is not None:
            percent.loc["best"] = best.to_numpy() * 100.0
        return self.print_table(percent, title="Median percentage error (%)", floatfmt=".2f")

    def print_search_summary(self, summary: pd.DataFrame):
        return self.print_table(
            summary.set_index("decoder")[["summary", "t", "diverged"]],
            title="MPE % (non-zero count)",
            floatfmt=".4g",
        )

    def print_tradeoff(self, curve: pd.DataFrame, knee=None):
        title = "Sparsity tradeoff"
        if knee is not None:
            title += f" (knee at alpha={knee['alpha']:.4g})"
        return self.print_table(curve, title=title, floatfmt=".4g", showindex=False)
