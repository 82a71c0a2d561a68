"""Toolkit for measuring and reducing the model variance of binary segmentation learners."""

__version__ = "0.1.0"

from .imgcore import BinaryMask, ColorImage, GrayImage, Manifest, RoiBox, SampleRecord, ValueMap

__all__ = [
    "BinaryMask",
    "ColorImage",
    "GrayImage",
    "Manifest",
    "RoiBox",
    "SampleRecord",
    "ValueMap",
    "__version__",
]
