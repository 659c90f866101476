"""Facial landmark localization on depth images.

Two gated cascade methods share one data model: GRID (ridge descent maps
over HOG features) and SMUF (jointly learned binary depth-difference codes
and descent maps). The package also ships a synthetic depth-face
generator, an evaluation suite, a model container and a command line.
"""

from .depth import DepthImage, FaceBox, Shape, detect_face, preprocess
from .estimators import GridLandmarker, SmufLandmarker
from .landmarks import LANDMARK_NAMES, N_LANDMARKS

__version__ = "0.1.0"

__all__ = [
    "DepthImage",
    "FaceBox",
    "GridLandmarker",
    "LANDMARK_NAMES",
    "N_LANDMARKS",
    "Shape",
    "SmufLandmarker",
    "detect_face",
    "preprocess",
]
