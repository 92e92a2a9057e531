"""Polygonal collision-cone control barrier functions and a CBF-QP safety filter."""

__version__ = "0.1.0"
