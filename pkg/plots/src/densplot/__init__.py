"""densplot: renders densprop's delimited outputs into publication figures."""

from .io import ErrorCurve, GridPanel, InputFormatError, read_error_table, read_grid
from .render import render_error_curves, render_heatmaps

__version__ = "0.1.0"
