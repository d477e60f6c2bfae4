"""Photometric stereo from observation maps with a small numpy CNN."""

__version__ = "0.1.0"
