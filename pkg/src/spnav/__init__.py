"""Fetal-brain ultrasound standard-plane proximity toolkit."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    PlaneAnnotation,
    Pose6D,
    Rot6D,
    proximity,
)
