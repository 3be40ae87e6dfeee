"""Spatial-temporal attention transfer from a high-resolution teacher to an
extreme low-resolution student, on a small numpy autodiff engine."""

__version__ = "0.1.0"
