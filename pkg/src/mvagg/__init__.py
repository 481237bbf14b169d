"""Multiview pedestrian detection with stacked homographies and homography attention."""

__version__ = "0.1.0"
