"""Offshore platform detection pipeline around a pluggable detector."""

from .core import (Detection, GeoBBox, GeoTransform, Label, ObjectClass, PipelineConfig, PixelBBox, RasterF,
                   geolocate, iou, merge_class)

__all__ = [
    "Detection", "GeoBBox", "GeoTransform", "Label", "ObjectClass", "PipelineConfig", "PixelBBox", "RasterF",
    "geolocate", "iou", "merge_class",
]
__version__ = "0.1.0"
