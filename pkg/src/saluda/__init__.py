"""Occupancy-regularised unsupervised domain adaptation for lidar segmentation."""

__version__ = "0.1.0"
