"""Tree-trunk radar toolkit: SFCW B-scan synthesis, clutter removal and defect classification."""

__version__ = "0.1.0"
