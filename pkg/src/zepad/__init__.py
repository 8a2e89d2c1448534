"""Dual-branch adversarial defense laboratory for pre-trained encoders."""

__version__ = "0.1.0"

from . import advtune, attack, bmp, core, rfdm  # noqa: F401
