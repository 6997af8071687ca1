"""Iliopsoas muscle segmentation and cohort morphometry on synthetic phantoms."""

__version__ = "0.1.0"
