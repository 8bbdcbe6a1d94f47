"""Camera trajectory verification, repair, windowing and evaluation."""

__version__ = "0.1.0"
