"""Ordinal depth estimation from superpixel pairs: data I/O, superpixels and
pair sampling, multi-scale context extraction, a numpy CNN classifier,
depth reconstruction by energy minimization, and evaluation metrics."""

from . import context, dataio, metrics, reconstruct, superpixel
from .superpixel import Ordinal

__all__ = ["Ordinal", "context", "dataio", "metrics", "reconstruct", "superpixel"]
__version__ = "0.1.0"
