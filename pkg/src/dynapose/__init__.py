"""Multi-person keypoint detection with per-instance dynamic heads."""

__version__ = "0.1.0"
