"""Geometry-aware salient object detection on point clouds."""

__version__ = "0.1.0"
