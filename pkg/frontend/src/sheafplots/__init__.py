"""Plotting frontend for sheafflow artifacts.

Pure file-to-file transforms: reads the trace CSV / summary JSON schemas
emitted by the experiment CLI and writes figures. Never recomputes any
quantity.
"""

from .plots import PlotDataError, PlotJob, render

__version__ = "0.1.0"
