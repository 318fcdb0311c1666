"""Multi-class traffic object detection with shared aggregated channel features."""

__version__ = "0.1.0"
